#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fptn/tensor.hpp"

namespace fptn {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// the owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient after Tape::backward; zeros when the node was not on the path.
  Tensor grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed primitives.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// backward() walks the record in reverse, which visits each node after all
/// of its consumers. A tape is single-owner: do not record or run backward
/// from two threads at once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked iff value.requires_grad().
  Var leaf(Tensor value);
  /// Leaf that always receives a gradient.
  Var parameter(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
  // Gradient buffer for node id, allocated as zeros on first access.
  Tensor& grad_buffer(std::size_t id);
  Tensor grad(std::size_t id) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

enum class Mode { train, eval };

/// Running statistics for one batch-normalization site.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  bool initialized = false;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Tensor::zeros({channels})), running_var(Tensor::ones({channels})) {}
};

// ---- primitives -----------------------------------------------------------

/// a [..., k] times b [k, n] -> [..., n]. Leading axes of a are flattened.
Var matmul(Var a, Var b);
/// a [B, m, k] times b [B, k, n] (or b [B, n, k] when transpose_b).
Var batched_matmul(Var a, Var b, bool transpose_b = false);
Var affine(Var x, Var w, Var b);
Var add(Var a, Var b);
/// x plus b, where b's shape equals the trailing axes of x.
Var add_broadcast(Var x, Var b);
Var scale(Var x, double factor);
Var square(Var x);
Var sum(Var x);
Var gelu(Var x);
Var softmax(Var x, std::size_t axis);
Var reshape(Var x, Shape shape);
/// [B, N, h*D] -> [B*h, N, D]
Var split_heads(Var x, std::size_t heads);
/// [B*h, N, D] -> [B, N, h*D]
Var merge_heads(Var x, std::size_t heads);
/// Normalizes each channel (last axis) over every other position.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);
/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, std::mt19937_64& rng);
/// mean |pred - target|, subgradient 0 where the residual is exactly 0.
Var mean_abs_error(Var pred, Var target);

// Scalar helpers used by the primitives and by test oracles.
double gelu_value(double x);
double gelu_derivative(double x);

// ---- finite-difference verification --------------------------------------

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
  const GradCheckEntry* worst() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Applied to each analytic gradient before comparison. Negative-control hook.
  std::function<void(const std::string& name, Tensor& grad)> tamper;
};

/// Builds the scalar loss on `tape` from parameter leaves given in the same
/// order as the params passed to finite_diff_check.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

/// abs(a - n) / max(abs(a), abs(n), 1e-6). The floor sits above the
/// rounding noise of a central difference on an O(1) loss.
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients against central differences for every
/// coordinate of every parameter. The parameter tensors are perturbed in
/// place and restored before returning.
GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<const ParamRef> params,
                                  const GradCheckOptions& options = {});

}  // namespace fptn
