#include "fptn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "fptn/errors.hpp"
#include "fptn/reference.hpp"
#include "fptn/synthetic.hpp"
#include "json.hpp"

namespace fptn {

// ---- RAdam ------------------------------------------------------------------

RAdam::RAdam(std::span<const ParamRef> params, RAdamOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params) {
    m_.push_back(Tensor::zeros(p.tensor->shape()));
    v_.push_back(Tensor::zeros(p.tensor->shape()));
  }
}

double RAdam::rho(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

void RAdam::step(std::span<const ParamRef> params, std::span<const Tensor* const> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractError("RAdam::step: parameter list does not match the optimizer state");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->shape() != params[i].tensor->shape()) {
      throw DimensionError("RAdam::step: gradient shape mismatch for '" + params[i].name + "'");
    }
    if (!all_finite(*grads[i])) throw DivergenceError("non-finite gradient in parameter '" + params[i].name + "'");
  }

  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2, lr = options_.lr;
  const double t = static_cast<double>(t_);
  const double bias1 = 1.0 - std::pow(b1, t);
  const double bias2 = 1.0 - std::pow(b2, t);
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho(t_, b2);
  const bool rectified = rho_t > 4.0;
  const double r = rectified
                       ? std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                       : 0.0;
  const double sqrt_bias2 = std::sqrt(bias2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i].tensor->raw();
    const double* g = grads[i]->raw();
    double* m = m_[i].raw();
    double* v = v_[i].raw();
    for (std::size_t j = 0, n = m_[i].size(); j < n; ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double m_hat = m[j] / bias1;
      if (rectified) {
        w[j] -= lr * r * m_hat * sqrt_bias2 / (std::sqrt(v[j]) + options_.eps);
      } else {
        w[j] -= lr * m_hat;
      }
    }
  }
}

// ---- metrics ----------------------------------------------------------------

MetricsReport evaluate_metrics(std::span<const double> prediction, std::span<const double> target,
                               double mape_mask_threshold) {
  if (prediction.size() != target.size()) {
    throw DimensionError("metrics: " + std::to_string(prediction.size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
  }
  if (target.empty()) throw ContractError("metrics: no values to evaluate");
  if (!(mape_mask_threshold >= 0.0)) throw ConfigError("MAPE mask threshold must be >= 0");
  MetricsReport r;
  r.mape_mask_threshold = mape_mask_threshold;
  r.count = target.size();
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double e = prediction[i] - target[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (std::abs(target[i]) >= mape_mask_threshold) {
      pct_sum += std::abs(e) / std::abs(target[i]);
      ++kept;
    }
  }
  const double n = static_cast<double>(target.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.masked = target.size() - kept;
  if (kept > 0) r.mape = 100.0 * pct_sum / static_cast<double>(kept);
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["mae"] = r.mae;
  j["rmse"] = r.rmse;
  j["mape"] = r.mape ? nlohmann::json(*r.mape) : nlohmann::json(nullptr);
  j["mape_mask_threshold"] = r.mape_mask_threshold;
  j["count"] = r.count;
  j["masked"] = r.masked;
  return j.dump();
}

// ---- early stopping ---------------------------------------------------------

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {
  if (patience_ < 1) throw ConfigError("patience must be >= 1");
}

bool EarlyStopping::update(double val_mae) {
  improved_ = val_mae < best_ - min_delta_;
  if (improved_) {
    best_ = val_mae;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

// ---- training loop ----------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

namespace {

const Tensor& batch_target(const Batch& b, TargetScale scale) {
  return scale == TargetScale::normalized ? b.y : b.y_raw;
}

void clip_gradients(std::vector<Tensor*>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (double v : g->data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (Tensor* g : grads)
    for (auto& v : g->data()) v *= f;
}

}  // namespace

Tensor predict_raw(FptnModel& model, const Batch& batch, TargetScale scale, const NormStats& stats) {
  Tensor out = model.predict(batch.x, batch.tf);
  if (scale == TargetScale::normalized) invert_zscore(out.data(), stats);
  return out;
}

MetricsReport evaluate_split(FptnModel& model, const SampleSet& split, TargetScale scale, double mape_mask_threshold,
                             std::size_t batch_size) {
  if (split.empty()) throw ContractError("cannot evaluate an empty split");
  std::vector<double> pred, target;
  pred.reserve(split.size() * split.sensors() * split.horizon());
  target.reserve(pred.capacity());
  auto stream = iterate_batches(split, batch_size, false, 0);
  while (auto b = stream.next()) {
    const Tensor p = predict_raw(model, *b, scale, split.stats());
    pred.insert(pred.end(), p.data().begin(), p.data().end());
    target.insert(target.end(), b->y_raw.data().begin(), b->y_raw.data().end());
  }
  return evaluate_metrics(pred, target, mape_mask_threshold);
}

double split_loss(FptnModel& model, const SampleSet& split, TargetScale scale, std::size_t batch_size) {
  if (split.empty()) throw ContractError("cannot evaluate an empty split");
  double total = 0.0;
  std::size_t count = 0;
  auto stream = iterate_batches(split, batch_size, false, 0);
  while (auto b = stream.next()) {
    const Tensor p = model.predict(b->x, b->tf);
    const Tensor& y = batch_target(*b, scale);
    for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - y[i]);
    count += p.size();
  }
  return total / static_cast<double>(count);
}

MetricsReport evaluate_last_value(const SampleSet& split, double mape_mask_threshold) {
  if (split.empty()) throw ContractError("cannot evaluate an empty split");
  std::vector<double> pred, target;
  for (std::size_t i = 0; i < split.size(); ++i) {
    Sample s = split.sample(i);
    invert_zscore(s.x.data(), split.stats());
    const Tensor p = baseline_last_value(s.x, split.horizon());
    pred.insert(pred.end(), p.data().begin(), p.data().end());
    target.insert(target.end(), s.y_raw.data().begin(), s.y_raw.data().end());
  }
  return evaluate_metrics(pred, target, mape_mask_threshold);
}

TrainResult train(FptnModel model, const ForecastDataset& data, const TrainConfig& config) {
  config.validate();
  const auto& splits = data.splits;
  if (splits.train.empty() || splits.val.empty()) throw ConfigError("training needs non-empty train and val splits");

  auto params = model.parameters();
  RAdam optimizer(params, {.lr = config.lr});
  EarlyStopping stopper(config.patience);
  TrainResult result;
  result.best_model = model;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    try {
      auto stream = iterate_batches(splits.train, config.batch_size, config.shuffle, config.seed, epoch - 1);
      while (auto batch = stream.next()) {
        Tape tape;
        const auto out = model.forward(tape, batch->x, batch->tf, Mode::train);
        Var loss = mae_loss(out.prediction, tape.constant(batch_target(*batch, config.target_scale)));
        tape.backward(loss);
        std::vector<Tensor*> grads;
        for (const Var& b : out.bindings) grads.push_back(&tape.grad_buffer(b.id()));
        if (config.clip_norm > 0.0) clip_gradients(grads, config.clip_norm);
        optimizer.step(params, std::vector<const Tensor*>(grads.begin(), grads.end()));
        loss_sum += loss.value()[0] * static_cast<double>(batch->size());
        loss_count += batch->size();
      }
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.stop_reason = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
      break;
    } catch (const NumericError& e) {
      result.diverged = true;
      result.stop_reason = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    MetricsReport val;
    try {
      val = evaluate_split(model, splits.val, config.target_scale, config.mape_mask_threshold, config.eval_batch_size);
    } catch (const NumericError& e) {
      result.diverged = true;
      result.stop_reason = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
      break;
    }
    rec.val_mae = config.val_metric_hook ? config.val_metric_hook(epoch, val.mae) : val.mae;
    rec.val_rmse = val.rmse;
    rec.val_mape = val.mape;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (config.on_epoch) config.on_epoch(rec);

    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_mae)) {
      result.diverged = true;
      result.stop_reason = "non-finite loss in epoch " + std::to_string(epoch);
      break;
    }
    if (rec.val_mae < result.best_val_mae) {
      result.best_val_mae = rec.val_mae;
      result.best_epoch = epoch;
      result.best_model = model;
    }
    if (config.target_train_loss && rec.train_loss < *config.target_train_loss) {
      result.stop_reason = "reached target training loss";
      break;
    }
    if (stopper.update(rec.val_mae)) {
      result.stop_reason = "early stop: no improvement for " + std::to_string(config.patience) + " epochs";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "epoch limit";
  return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "epoch,train_loss,val_mae,val_rmse,val_mape,seconds\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_mae << ',' << r.val_rmse << ',';
    if (r.val_mape) out << *r.val_mape;
    out << ',' << r.seconds << '\n';
  }
}

// ---- sweep ------------------------------------------------------------------

std::vector<SweepRow> grid_search(const ModelConfig& base, const GridSpec& grid, const ForecastDataset& data,
                                  const TrainConfig& config) {
  if (grid.size() == 0) throw ConfigError("sweep grid is empty");
  std::vector<SweepRow> rows;
  for (std::size_t d : grid.d_model)
    for (std::size_t l : grid.layers)
      for (std::size_t h : grid.heads)
        for (double lr : grid.lr) {
          SweepRow row;
          row.d_model = d;
          row.layers = l;
          row.heads = h;
          row.lr = lr;
          row.reference_optimum =
              d == reference::kOptimumDModel && l == reference::kOptimumLayers && h == reference::kOptimumHeads;
          ModelConfig mc = base;
          mc.d_model = d;
          mc.layers = l;
          mc.heads = h;
          try {
            mc.validate();
          } catch (const ConfigError&) {
            row.status = "invalid";
            rows.push_back(row);
            continue;
          }
          TrainConfig tc = config;
          tc.lr = lr;
          const auto t0 = std::chrono::steady_clock::now();
          TrainResult res = train(FptnModel(mc), data, tc);
          row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          row.epochs_run = res.history.size();
          if (res.history.empty()) {
            row.status = "diverged";
            rows.push_back(row);
            continue;
          }
          row.status = res.diverged ? "diverged" : "ok";
          const EpochRecord& best = res.history[res.best_epoch - 1];
          row.val_mae = best.val_mae;
          row.val_rmse = best.val_rmse;
          row.val_mape = best.val_mape;
          row.train_loss = best.train_loss;
          for (const auto& r : res.history) row.min_train_loss = std::min(row.min_train_loss, r.train_loss);
          rows.push_back(row);
        }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    const bool a_ok = a.epochs_run > 0, b_ok = b.epochs_run > 0;
    if (a_ok != b_ok) return a_ok;
    return a_ok && a.val_mae < b.val_mae;
  });
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "rank,d_model,layers,heads,lr,status,val_mae,val_rmse,val_mape,train_loss,min_train_loss,epochs_run,"
         "seconds,reference_optimum\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i + 1 << ',' << r.d_model << ',' << r.layers << ',' << r.heads << ',' << r.lr << ',' << r.status << ',';
    if (r.epochs_run > 0) {
      out << r.val_mae << ',' << r.val_rmse << ',';
      if (r.val_mape) out << *r.val_mape;
      out << ',' << r.train_loss << ',' << r.min_train_loss;
    } else {
      out << ",,,,";
    }
    out << ',' << r.epochs_run << ',' << r.seconds << ',' << (r.reference_optimum ? 1 : 0) << '\n';
  }
}

}  // namespace fptn
