#include "fptn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fptn/errors.hpp"
#include "fptn/parallel.hpp"

namespace fptn {

// ---- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Tensor Var::grad() const { return tape_->grad(id_); }

Var Tape::leaf(Tensor value) {
  const bool track = value.requires_grad();
  nodes_.push_back(Node{std::move(value), Tensor{}, track, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  value.set_requires_grad(true);
  return leaf(std::move(value));
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool track = false;
  for (auto id : inputs) track = track || nodes_.at(id).needs_grad;
  Node node{std::move(value), Tensor{}, track, std::move(inputs), {}};
  if (track) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

Tensor Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) return Tensor::zeros(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
  const std::size_t root = loss.id();
  if (nodes_.at(root).value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(nodes_[root].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor{};
  grad_buffer(root)[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

Tensor& checked(Tensor& t, const char* op) {
  if (!all_finite(t)) throw NumericError(std::string(op) + ": produced a non-finite value");
  return t;
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, k * n, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double* crow = c + i * n;
      const double* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, k * n, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] += s;
      }
    }
  });
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(k, m * n, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      const double* brow = b + i * n;
      for (std::size_t p = lo; p < hi; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        double* crow = c + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

}  // namespace

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = bv.dim(0), n = bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  gemm_nn(av.raw(), bv.raw(), out.raw(), m, k, n);
  checked(out, "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.needs_grad(ia)) gemm_nt(g.raw(), t.value(ib).raw(), t.grad_buffer(ia).raw(), m, n, k);
    if (t.needs_grad(ib)) gemm_tn(t.value(ia).raw(), g.raw(), t.grad_buffer(ib).raw(), m, k, n);
  });
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != (transpose_b ? bv.dim(2) : bv.dim(1))) {
    throw DimensionError("batched_matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  Tensor out({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    const double* ap = av.raw() + s * m * k;
    const double* bp = bv.raw() + s * k * n;
    double* cp = out.raw() + s * m * n;
    if (transpose_b) {
      gemm_nt(ap, bp, cp, m, k, n);
    } else {
      gemm_nn(ap, bp, cp, m, k, n);
    }
  }
  checked(out, "batched_matmul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {ia, ib}, [ia, ib, batch, m, k, n, transpose_b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const bool ga = t.needs_grad(ia), gb = t.needs_grad(ib);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        double* da = ga ? t.grad_buffer(ia).raw() : nullptr;
        double* db = gb ? t.grad_buffer(ib).raw() : nullptr;
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gp = g.raw() + s * m * n;
          const double* ap = av.raw() + s * m * k;
          const double* bp = bv.raw() + s * k * n;
          if (transpose_b) {
            // C = A B^T: dA = G B, dB = G^T A
            if (ga) gemm_nn(gp, bp, da + s * m * k, m, n, k);
            if (gb) gemm_tn(gp, ap, db + s * k * n, m, n, k);
          } else {
            if (ga) gemm_nt(gp, bp, da + s * m * k, m, n, k);
            if (gb) gemm_tn(ap, gp, db + s * k * n, m, k, n);
          }
        }
      });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor out = av;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  checked(out, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      Tensor& d = t.grad_buffer(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

Var add_broadcast(Var x, Var b) {
  require_same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const auto& xs = xv.shape();
  const auto& bs = bv.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a trailing shape of " + shape_str(xs));
  }
  const std::size_t inner = bv.size();
  const std::size_t outer = xv.size() / inner;
  Tensor out = xv;
  out.set_requires_grad(false);
  for (std::size_t o = 0; o < outer; ++o) {
    double* row = out.raw() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) row[i] += bv[i];
  }
  checked(out, "add_broadcast");
  const std::size_t ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib, outer, inner](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.needs_grad(ix)) {
      Tensor& d = t.grad_buffer(ix);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& d = t.grad_buffer(ib);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* row = g.raw() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) d[i] += row[i];
      }
    }
  });
}

Var affine(Var x, Var w, Var b) {
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != wv.dim(1)) {
    throw DimensionError("affine: bias " + shape_str(bv.shape()) + " does not match weight " + shape_str(wv.shape()));
  }
  return add_broadcast(matmul(x, w), b);
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v *= factor;
  checked(out, "scale");
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
  });
}

Var square(Var x) {
  Tensor out = x.value();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v *= v;
  checked(out, "square");
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(ix);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * xv[i] * g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Tensor out = Tensor::scalar(s);
  checked(out, "sum");
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    Tensor& d = t.grad_buffer(ix);
    for (auto& v : d.data()) v += g;
  });
}

// erfc keeps the negative tail accurate where 1 + erf(x) would cancel to 0.
double gelu_value(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var gelu(Var x) {
  Tensor out = x.value();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v = gelu_value(v);
  checked(out, "gelu");
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(ix);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gelu_derivative(xv[i]) * g[i];
  });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);

  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  checked(out, "softmax");
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, outer, inner, len](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t q = base + j * inner;
          d[q] += y[q] * (g[q] - dot);
        }
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  out.set_requires_grad(false);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

namespace {

// Index maps between [B, N, h*D] and [B*h, N, D].
inline std::size_t merged_index(std::size_t b, std::size_t n, std::size_t head, std::size_t j, std::size_t tokens,
                                std::size_t heads, std::size_t width) {
  return (b * tokens + n) * heads * width + head * width + j;
}
inline std::size_t split_index(std::size_t b, std::size_t n, std::size_t head, std::size_t j, std::size_t tokens,
                               std::size_t heads, std::size_t width) {
  return ((b * heads + head) * tokens + n) * width + j;
}

template <typename F>
void for_each_head_coord(std::size_t batch, std::size_t tokens, std::size_t heads, std::size_t width, F&& f) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < tokens; ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < width; ++j)
          f(merged_index(b, n, h, j, tokens, heads, width), split_index(b, n, h, j, tokens, heads, width));
}

}  // namespace

Var split_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || heads == 0 || xv.dim(2) % heads != 0) {
    throw DimensionError("split_heads: " + shape_str(xv.shape()) + " cannot be split into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t batch = xv.dim(0), tokens = xv.dim(1), width = xv.dim(2) / heads;
  Tensor out({batch * heads, tokens, width});
  for_each_head_coord(batch, tokens, heads, width, [&](std::size_t m, std::size_t s) { out[s] = xv[m]; });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, batch, tokens, heads, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& d = t.grad_buffer(ix);
    for_each_head_coord(batch, tokens, heads, width, [&](std::size_t m, std::size_t s) { d[m] += g[s]; });
  });
}

Var merge_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || heads == 0 || xv.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: " + shape_str(xv.shape()) + " is not a stack of " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t batch = xv.dim(0) / heads, tokens = xv.dim(1), width = xv.dim(2);
  Tensor out({batch, tokens, heads * width});
  for_each_head_coord(batch, tokens, heads, width, [&](std::size_t m, std::size_t s) { out[m] = xv[s]; });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, batch, tokens, heads, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& d = t.grad_buffer(ix);
    for_each_head_coord(batch, tokens, heads, width, [&](std::size_t m, std::size_t s) { d[s] += g[m]; });
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t channels = xv.cols();
  const std::size_t rows = xv.rows();
  if (gamma.value().size() != channels || beta.value().size() != channels ||
      state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw DimensionError("batch_norm: parameters do not match channel count " + std::to_string(channels));
  }
  std::vector<double> mean(channels, 0.0), inv_std(channels, 0.0);
  if (mode == Mode::train) {
    if (rows < 2) throw DimensionError("batch_norm: train mode needs at least 2 positions per channel");
    std::vector<double> var(channels, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < channels; ++c) mean[c] += xv[r * channels + c];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < channels; ++c) {
        const double dv = xv[r * channels + c] - mean[c];
        var[c] += dv * dv;
      }
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t c = 0; c < channels; ++c) {
      var[c] /= static_cast<double>(rows);
      inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c] * unbias;
    }
    state.initialized = true;
  } else {
    if (!state.initialized) throw StateError("batch_norm: eval mode requires initialized running statistics");
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  std::vector<double> xhat(xv.size());
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = r * channels + c;
      xhat[i] = (xv[i] - mean[c]) * inv_std[c];
      out[i] = gv[c] * xhat[i] + bv[c];
    }
  checked(out, "batch_norm");

  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool training = mode == Mode::train;
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, channels, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& gv = t.value(ig);
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t i = r * channels + c;
            sum_g[c] += g[i];
            sum_gx[c] += g[i] * xhat[i];
          }
        if (t.needs_grad(ig)) {
          Tensor& d = t.grad_buffer(ig);
          for (std::size_t c = 0; c < channels; ++c) d[c] += sum_gx[c];
        }
        if (t.needs_grad(ib)) {
          Tensor& d = t.grad_buffer(ib);
          for (std::size_t c = 0; c < channels; ++c) d[c] += sum_g[c];
        }
        if (t.needs_grad(ix)) {
          Tensor& d = t.grad_buffer(ix);
          const double inv_rows = 1.0 / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t i = r * channels + c;
              const double k = gv[c] * inv_std[c];
              if (training) {
                d[i] += k * (g[i] - sum_g[c] * inv_rows - xhat[i] * sum_gx[c] * inv_rows);
              } else {
                d[i] += k * g[i];
              }
            }
        }
      });
}

Var dropout(Var x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: probability must be in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double factor = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = keep(rng) ? factor : 0.0;
  Tensor out = x.value();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += mask[i] * g[i];
  });
}

Var mean_abs_error(Var pred, Var target) {
  require_same_tape(pred, target);
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  if (pv.shape() != tv.shape()) {
    throw DimensionError("mae_loss: shape mismatch " + shape_str(pv.shape()) + " vs " + shape_str(tv.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
  const double n = static_cast<double>(pv.size());
  Tensor out = Tensor::scalar(s / n);
  checked(out, "mae_loss");
  const std::size_t ip = pred.id(), it = target.id();
  return pred.tape().record(std::move(out), {ip, it}, [ip, it, n](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0] / n;
    const Tensor& pv = t.value(ip);
    const Tensor& tv = t.value(it);
    double* dp = t.needs_grad(ip) ? t.grad_buffer(ip).raw() : nullptr;
    double* dt = t.needs_grad(it) ? t.grad_buffer(it).raw() : nullptr;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double r = pv[i] - tv[i];
      const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
      if (dp) dp[i] += s * g;
      if (dt) dt[i] -= s * g;
    }
  });
}

// ---- finite differences -----------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

const GradCheckEntry* GradCheckReport::worst() const {
  const GradCheckEntry* w = nullptr;
  for (const auto& e : entries)
    if (!w || e.max_rel_error > w->max_rel_error) w = &e;
  return w;
}

GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<const ParamRef> params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("finite_diff_check: step must be positive");

  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.constant(*p.tensor));
    return loss(tape, vars).value()[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.parameter(*p.tensor));
    Var l = loss(tape, vars);
    tape.backward(l);
    for (std::size_t i = 0; i < params.size(); ++i) {
      analytic.push_back(vars[i].grad());
      if (options.tamper) options.tamper(params[i].name, analytic.back());
    }
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& w = *params[pi].tensor;
    GradCheckEntry entry;
    entry.name = params[pi].name;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + options.step;
      const double up = evaluate();
      w[i] = saved - options.step;
      const double down = evaluate();
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = relative_error(analytic[pi][i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        entry.worst_index = i;
        entry.analytic = analytic[pi][i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace fptn
