#include "fptn/model.hpp"

#include <cmath>

#include "fptn/errors.hpp"

namespace fptn {

std::string_view to_string(PositionalMode mode) {
  switch (mode) {
    case PositionalMode::none:
      return "none";
    case PositionalMode::fixed:
      return "fixed";
    case PositionalMode::learnable:
      return "learnable";
  }
  return "unknown";
}

PositionalMode parse_positional_mode(std::string_view text) {
  if (text == "none") return PositionalMode::none;
  if (text == "fixed") return PositionalMode::fixed;
  if (text == "learnable") return PositionalMode::learnable;
  throw ConfigError("unknown positional mode '" + std::string(text) + "' (expected none, fixed or learnable)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (num_sensors < 1) fail("num_sensors must be >= 1");
  if (input_steps < 1) fail("input_steps (T) must be >= 1");
  if (horizon < 1) fail("horizon (K) must be >= 1");
  if (heads < 1) fail("heads (h) must be >= 1");
  if (layers < 1 && !allow_empty_stack) fail("layers (L) must be >= 1");
  if (d_model % heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  }
  if (d_model <= input_steps) {
    fail("d_model " + std::to_string(d_model) + " must exceed input_steps " + std::to_string(input_steps));
  }
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, t = c.input_steps;
  std::size_t n = t * d + d;
  if (c.use_time_embedding) n += 3 * t * d + d;
  if (c.positional_mode == PositionalMode::learnable) n += c.num_sensors * d;
  // 4 fused projections, FFN d->4d->d with biases, two norms with gamma and beta.
  n += c.layers * (4 * d * d + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d);
  n += d * c.horizon + c.horizon;
  return n;
}

Tensor sinusoidal_encoding(std::size_t positions, std::size_t d_model) {
  Tensor pe({positions, d_model});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < d_model; ++c) {
      const double even = static_cast<double>(c - c % 2);
      const double angle = static_cast<double>(p) / std::pow(10000.0, even / static_cast<double>(d_model));
      pe.at(p, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor positional_embedding(PositionalMode mode, std::size_t positions, std::size_t d_model, std::mt19937_64& rng) {
  switch (mode) {
    case PositionalMode::none:
      return Tensor::zeros({positions, d_model});
    case PositionalMode::fixed:
      return sinusoidal_encoding(positions, d_model);
    case PositionalMode::learnable: {
      Tensor pe({positions, d_model});
      std::normal_distribution<double> dist(0.0, 0.02);
      for (auto& v : pe.data()) v = dist(rng);
      return pe;
    }
  }
  throw ConfigError("unknown positional mode");
}

// ---- blocks -----------------------------------------------------------------

Var embed_traffic(Var x, Var weight, Var bias) {
  if (x.value().cols() != weight.value().dim(0)) {
    throw DimensionError("embed_traffic: input rows have length " + std::to_string(x.value().cols()) +
                         " but the embedding expects T = " + std::to_string(weight.value().dim(0)));
  }
  return affine(x, weight, bias);
}

Var build_time_embedding(Var time_features, Var weight, Var bias) {
  if (time_features.value().cols() != weight.value().dim(0)) {
    throw DimensionError("build_time_embedding: feature width " + std::to_string(time_features.value().cols()) +
                         " does not equal 3T = " + std::to_string(weight.value().dim(0)));
  }
  return affine(time_features, weight, bias);
}

Var compose_input(Var traffic, Var time, Var positional) {
  Var e = traffic;
  if (time.valid()) e = add(e, time);
  if (positional.valid()) e = add_broadcast(e, positional);
  return e;
}

Var scaled_dot_attention(Var q, Var k, Var v, Tensor* weights) {
  const bool flat = q.value().rank() == 2;
  if (flat) {
    auto lift = [](Var t) { return reshape(t, {1, t.value().dim(0), t.value().dim(1)}); };
    Var out = scaled_dot_attention(lift(q), lift(k), lift(v), weights);
    if (weights) *weights = weights->reshaped({weights->dim(1), weights->dim(2)});
    return reshape(out, {out.value().dim(1), out.value().dim(2)});
  }
  if (q.value().shape() != k.value().shape() || q.value().dim(1) != v.value().dim(1)) {
    throw DimensionError("attention: incompatible Q " + shape_str(q.value().shape()) + ", K " +
                         shape_str(k.value().shape()) + ", V " + shape_str(v.value().shape()));
  }
  const double width = static_cast<double>(q.value().dim(2));
  Var scores = scale(batched_matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(width));
  Var probs = softmax(scores, 2);
  if (weights) *weights = probs.value();
  return batched_matmul(probs, v);
}

Var multi_head_attention(Var x, Var w_query, Var w_key, Var w_value, Var w_out, std::size_t heads, Tensor* weights) {
  Var q = split_heads(matmul(x, w_query), heads);
  Var k = split_heads(matmul(x, w_key), heads);
  Var v = split_heads(matmul(x, w_value), heads);
  Var ctx = merge_heads(scaled_dot_attention(q, k, v, weights), heads);
  return matmul(ctx, w_out);
}

Var feed_forward(Var x, Var w1, Var b1, Var w2, Var b2) { return affine(gelu(affine(x, w1, b1)), w2, b2); }

Var encoder_layer(Var x, const EncoderLayerVars& p, EncoderLayerParams& state, std::size_t heads, Mode mode,
                  Tensor* weights, double dropout_p, std::mt19937_64* rng) {
  const bool drop = mode == Mode::train && dropout_p > 0.0 && rng != nullptr;
  Var attn = multi_head_attention(x, p.w_query, p.w_key, p.w_value, p.w_out, heads, weights);
  if (drop) attn = dropout(attn, dropout_p, *rng);
  Var a = batch_norm(add(x, attn), p.norm1_gamma, p.norm1_beta, state.norm1, mode);
  Var ffn = feed_forward(a, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2);
  if (drop) ffn = dropout(ffn, dropout_p, *rng);
  return batch_norm(add(a, ffn), p.norm2_gamma, p.norm2_beta, state.norm2, mode);
}

Var mae_loss(Var prediction, Var target) { return mean_abs_error(prediction, target); }

// ---- FptnModel --------------------------------------------------------------

namespace {

Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor w({fan_in, fan_out});
  for (auto& v : w.data()) v = dist(rng);
  return w;
}

}  // namespace

FptnModel::FptnModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  dropout_rng_.seed(config_.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t d = config_.d_model, t = config_.input_steps;

  params_.traffic_weight = glorot(t, d, rng);
  params_.traffic_bias = Tensor::zeros({d});
  if (config_.use_time_embedding) {
    params_.time_weight = glorot(3 * t, d, rng);
    params_.time_bias = Tensor::zeros({d});
  }
  params_.positional = positional_embedding(config_.positional_mode, config_.num_sensors, d, rng);

  params_.layers.resize(config_.layers);
  for (auto& layer : params_.layers) {
    layer.w_query = glorot(d, d, rng);
    layer.w_key = glorot(d, d, rng);
    layer.w_value = glorot(d, d, rng);
    layer.w_out = glorot(d, d, rng);
    layer.ffn_w1 = glorot(d, 4 * d, rng);
    layer.ffn_b1 = Tensor::zeros({4 * d});
    layer.ffn_w2 = glorot(4 * d, d, rng);
    layer.ffn_b2 = Tensor::zeros({d});
    layer.norm1_gamma = Tensor::ones({d});
    layer.norm1_beta = Tensor::zeros({d});
    layer.norm2_gamma = Tensor::ones({d});
    layer.norm2_beta = Tensor::zeros({d});
    layer.norm1 = BatchNormState(d);
    layer.norm2 = BatchNormState(d);
  }
  params_.head_weight = glorot(d, config_.horizon, rng);
  params_.head_bias = Tensor::zeros({config_.horizon});
}

std::vector<ParamRef> FptnModel::parameters() {
  std::vector<ParamRef> out;
  out.push_back({"embed.traffic.weight", &params_.traffic_weight});
  out.push_back({"embed.traffic.bias", &params_.traffic_bias});
  if (config_.use_time_embedding) {
    out.push_back({"embed.time.weight", &params_.time_weight});
    out.push_back({"embed.time.bias", &params_.time_bias});
  }
  if (config_.positional_mode == PositionalMode::learnable) out.push_back({"embed.positional", &params_.positional});
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    auto& p = params_.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "attn.w_query", &p.w_query});
    out.push_back({pre + "attn.w_key", &p.w_key});
    out.push_back({pre + "attn.w_value", &p.w_value});
    out.push_back({pre + "attn.w_out", &p.w_out});
    out.push_back({pre + "ffn.w1", &p.ffn_w1});
    out.push_back({pre + "ffn.b1", &p.ffn_b1});
    out.push_back({pre + "ffn.w2", &p.ffn_w2});
    out.push_back({pre + "ffn.b2", &p.ffn_b2});
    out.push_back({pre + "norm1.gamma", &p.norm1_gamma});
    out.push_back({pre + "norm1.beta", &p.norm1_beta});
    out.push_back({pre + "norm2.gamma", &p.norm2_gamma});
    out.push_back({pre + "norm2.beta", &p.norm2_beta});
  }
  out.push_back({"head.weight", &params_.head_weight});
  out.push_back({"head.bias", &params_.head_bias});
  return out;
}

std::size_t FptnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : const_cast<FptnModel*>(this)->parameters()) n += p.tensor->size();
  return n;
}

void FptnModel::check_inputs(const Tensor& x, const Tensor& tf) const {
  if (x.rank() != 3 || x.dim(2) != config_.input_steps) {
    throw DimensionError("forward: expected input [B, N, " + std::to_string(config_.input_steps) + "], got " +
                         shape_str(x.shape()));
  }
  if (config_.positional_mode != PositionalMode::none && x.dim(1) != config_.num_sensors) {
    throw DimensionError("forward: model was built for N = " + std::to_string(config_.num_sensors) +
                         " sensors but input has N = " + std::to_string(x.dim(1)));
  }
  if (config_.use_time_embedding) {
    const Shape want{x.dim(0), x.dim(1), 3 * config_.input_steps};
    if (tf.shape() != want) {
      throw DimensionError("forward: time features must be " + shape_str(want) + ", got " + shape_str(tf.shape()));
    }
  }
}

FptnModel::Output FptnModel::forward(Tape& tape, const Tensor& x, const Tensor& time_features, Mode mode,
                                     AttentionWeights* attention) {
  Output out;
  for (const auto& p : parameters()) out.bindings.push_back(tape.parameter(*p.tensor));
  out.prediction = forward_with(tape, out.bindings, x, time_features, mode, attention);
  return out;
}

Var FptnModel::forward_with(Tape& tape, std::span<const Var> bindings, const Tensor& x, const Tensor& time_features,
                            Mode mode, AttentionWeights* attention) {
  check_inputs(x, time_features);
  std::size_t cursor = 0;
  auto next = [&]() -> Var {
    if (cursor >= bindings.size()) throw ContractError("forward: too few parameter bindings");
    return bindings[cursor++];
  };

  Var traffic_w = next(), traffic_b = next();
  Var xs = tape.constant(x);
  Var s = embed_traffic(xs, traffic_w, traffic_b);

  Var te;
  if (config_.use_time_embedding) {
    Var time_w = next(), time_b = next();
    te = build_time_embedding(tape.constant(time_features), time_w, time_b);
  }
  Var pe;
  switch (config_.positional_mode) {
    case PositionalMode::none:
      break;
    case PositionalMode::fixed:
      pe = tape.constant(params_.positional);
      break;
    case PositionalMode::learnable:
      pe = next();
      break;
  }
  Var h = compose_input(s, te, pe);

  if (attention) attention->per_layer.clear();
  for (auto& layer : params_.layers) {
    EncoderLayerVars v;
    v.w_query = next();
    v.w_key = next();
    v.w_value = next();
    v.w_out = next();
    v.ffn_w1 = next();
    v.ffn_b1 = next();
    v.ffn_w2 = next();
    v.ffn_b2 = next();
    v.norm1_gamma = next();
    v.norm1_beta = next();
    v.norm2_gamma = next();
    v.norm2_beta = next();
    Tensor weights;
    h = encoder_layer(h, v, layer, config_.heads, mode, attention ? &weights : nullptr, config_.dropout,
                      &dropout_rng_);
    if (attention) attention->per_layer.push_back(std::move(weights));
  }

  Var head_w = next(), head_b = next();
  if (cursor != bindings.size()) throw ContractError("forward: unused parameter bindings");
  return affine(h, head_w, head_b);
}

Tensor FptnModel::predict(const Tensor& x, const Tensor& time_features) {
  Tape tape;
  std::vector<Var> bindings;
  for (const auto& p : parameters()) bindings.push_back(tape.constant(*p.tensor));
  return forward_with(tape, bindings, x, time_features, Mode::eval).value();
}

void FptnModel::reset_norm_statistics() {
  for (auto& layer : params_.layers) {
    for (BatchNormState* s : {&layer.norm1, &layer.norm2}) {
      s->running_mean.fill(0.0);
      s->running_var.fill(1.0);
      s->initialized = true;
    }
  }
}

}  // namespace fptn
