#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fptn/autodiff.hpp"
#include "fptn/tensor.hpp"

namespace fptn {

enum class PositionalMode { none, fixed, learnable };

std::string_view to_string(PositionalMode mode);
PositionalMode parse_positional_mode(std::string_view text);

struct ModelConfig {
  std::size_t num_sensors = 1;   // N, tokens per sample
  std::size_t input_steps = 12;  // T, token width before embedding
  std::size_t horizon = 12;      // K
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;  // 0 is accepted only with allow_empty_stack
  bool use_time_embedding = true;
  PositionalMode positional_mode = PositionalMode::learnable;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  bool allow_empty_stack = false;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

struct EncoderLayerParams {
  Tensor w_query, w_key, w_value, w_out;  // fused across heads, d x d
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // d x 4d, 4d, 4d x d, d
  Tensor norm1_gamma, norm1_beta, norm2_gamma, norm2_beta;
  BatchNormState norm1, norm2;
};

struct ModelParams {
  Tensor traffic_weight, traffic_bias;  // T x d, d
  Tensor time_weight, time_bias;        // 3T x d, d (only with time embedding)
  Tensor positional;                    // N x d (zeros for mode none)
  std::vector<EncoderLayerParams> layers;
  Tensor head_weight, head_bias;  // d x K, K
};

/// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

/// Sinusoidal table: even channels sin(p / 10000^(c/d)), odd channels cos of
/// the same angle as the preceding even channel.
Tensor sinusoidal_encoding(std::size_t positions, std::size_t d_model);

/// Positional table for the requested mode. learnable draws N(0, 0.02^2).
Tensor positional_embedding(PositionalMode mode, std::size_t positions, std::size_t d_model, std::mt19937_64& rng);

// ---- building blocks over [B, N, *] tensors ---------------------------------

Var embed_traffic(Var x, Var weight, Var bias);
Var build_time_embedding(Var time_features, Var weight, Var bias);
Var compose_input(Var traffic, Var time, Var positional);

/// softmax(Q K^T / sqrt(D)) V per leading batch index. Q, K, V: [B, N, D].
/// When `weights` is non-null the attention matrix [B, N, N] is stored there.
Var scaled_dot_attention(Var q, Var k, Var v, Tensor* weights = nullptr);

struct AttentionWeights {
  std::vector<Tensor> per_layer;  // each [B*h, N, N]
};

Var multi_head_attention(Var x, Var w_query, Var w_key, Var w_value, Var w_out, std::size_t heads,
                         Tensor* weights = nullptr);
Var feed_forward(Var x, Var w1, Var b1, Var w2, Var b2);

/// Leaf handles for one encoder layer, in the order parameters() lists them.
struct EncoderLayerVars {
  Var w_query, w_key, w_value, w_out;
  Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Var norm1_gamma, norm1_beta, norm2_gamma, norm2_beta;
};

/// Post-norm layer: a = BN1(x + MHA(x)); y = BN2(a + FFN(a)).
/// Dropout, when enabled, applies to both sublayer outputs in train mode.
Var encoder_layer(Var x, const EncoderLayerVars& vars, EncoderLayerParams& state, std::size_t heads, Mode mode,
                  Tensor* weights = nullptr, double dropout_p = 0.0, std::mt19937_64* rng = nullptr);

Var mae_loss(Var prediction, Var target);

/// The full network.
class FptnModel {
 public:
  FptnModel() = default;
  /// Builds and initializes parameters from config.seed.
  explicit FptnModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// Trainable parameters in a fixed order with stable dotted names.
  std::vector<ParamRef> parameters();
  std::size_t parameter_count() const;

  /// Calls fn(name, tensor) for every persisted array, trainable or not
  /// (running statistics and fixed positional tables included).
  template <typename F>
  void for_each_array(F&& fn);

  struct Output {
    Var prediction;             // [B, N, K]
    std::vector<Var> bindings;  // leaves matching parameters()
  };

  /// Binds every trainable parameter as a fresh leaf and runs the network.
  Output forward(Tape& tape, const Tensor& x, const Tensor& time_features, Mode mode,
                 AttentionWeights* attention = nullptr);

  /// Runs the network against caller-supplied parameter leaves.
  Var forward_with(Tape& tape, std::span<const Var> bindings, const Tensor& x, const Tensor& time_features, Mode mode,
                   AttentionWeights* attention = nullptr);

  /// Eval-mode inference without gradient tracking.
  Tensor predict(const Tensor& x, const Tensor& time_features);

  /// Marks batch-norm statistics as identity (mean 0, var 1).
  void reset_norm_statistics();

 private:
  void check_inputs(const Tensor& x, const Tensor& time_features) const;

  ModelConfig config_;
  ModelParams params_;
  std::mt19937_64 dropout_rng_;
};

template <typename F>
void FptnModel::for_each_array(F&& fn) {
  fn("embed.traffic.weight", params_.traffic_weight);
  fn("embed.traffic.bias", params_.traffic_bias);
  if (config_.use_time_embedding) {
    fn("embed.time.weight", params_.time_weight);
    fn("embed.time.bias", params_.time_bias);
  }
  fn("embed.positional", params_.positional);
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    auto& p = params_.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    fn(pre + "attn.w_query", p.w_query);
    fn(pre + "attn.w_key", p.w_key);
    fn(pre + "attn.w_value", p.w_value);
    fn(pre + "attn.w_out", p.w_out);
    fn(pre + "ffn.w1", p.ffn_w1);
    fn(pre + "ffn.b1", p.ffn_b1);
    fn(pre + "ffn.w2", p.ffn_w2);
    fn(pre + "ffn.b2", p.ffn_b2);
    fn(pre + "norm1.gamma", p.norm1_gamma);
    fn(pre + "norm1.beta", p.norm1_beta);
    fn(pre + "norm2.gamma", p.norm2_gamma);
    fn(pre + "norm2.beta", p.norm2_beta);
    fn(pre + "norm1.running_mean", p.norm1.running_mean);
    fn(pre + "norm1.running_var", p.norm1.running_var);
    fn(pre + "norm2.running_mean", p.norm2.running_mean);
    fn(pre + "norm2.running_var", p.norm2.running_var);
  }
  fn("head.weight", params_.head_weight);
  fn("head.bias", params_.head_bias);
}

}  // namespace fptn
