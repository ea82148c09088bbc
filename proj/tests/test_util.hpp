#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "fptn/autodiff.hpp"
#include "fptn/tensor.hpp"

namespace fptn::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Nested-loop product, accumulated in p order starting from 0.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

inline Tensor affine_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor c = matmul_oracle(x, w);
  for (std::size_t i = 0; i < c.dim(0); ++i)
    for (std::size_t j = 0; j < c.dim(1); ++j) c.at(i, j) += b[j];
  return c;
}

inline double gelu_oracle(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

// Random linear functional <y, probe> so a gradient check exercises the
// full Jacobian of y rather than a symmetric reduction.
inline Var probe(Var y, const Tensor& weights) {
  Tape& t = y.tape();
  const std::size_t n = y.value().size();
  Var flat = reshape(y, {1, n});
  return reshape(matmul(flat, t.constant(weights.reshaped({n, 1}))), {1});
}

}  // namespace fptn::testing
