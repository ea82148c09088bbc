#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fptn/autodiff.hpp"
#include "fptn/data.hpp"
#include "fptn/model.hpp"

namespace fptn {

// ---- optimizer --------------------------------------------------------------

struct RAdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Rectified Adam. While the variance rectification term rho_t <= 4 the
/// update is the bias-corrected momentum step lr * m_hat.
class RAdam {
 public:
  RAdam() = default;
  RAdam(std::span<const ParamRef> params, RAdamOptions options);

  /// Throws DivergenceError naming the first parameter with a non-finite
  /// gradient; in that case nothing is updated.
  void step(std::span<const ParamRef> params, std::span<const Tensor* const> grads);

  std::size_t steps_taken() const { return t_; }
  const RAdamOptions& options() const { return options_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  /// rho_t for step t (1-based).
  static double rho(std::size_t t, double beta2);

 private:
  RAdamOptions options_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---- metrics ----------------------------------------------------------------

struct MetricsReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;  // percent; empty when every target is masked
  double mape_mask_threshold = 1e-3;
  std::size_t count = 0;
  std::size_t masked = 0;
};

/// MAE and RMSE over all entries; MAPE over entries with |y| >= threshold.
MetricsReport evaluate_metrics(std::span<const double> prediction, std::span<const double> target,
                               double mape_mask_threshold = 1e-3);

std::string metrics_to_json(const MetricsReport& report);

// ---- early stopping ---------------------------------------------------------

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 1e-9);
  /// Returns true when training should stop after this epoch.
  bool update(double val_mae);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t epochs_since_best() const { return since_best_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_best_ = 0;
  bool improved_ = false;
};

// ---- training loop ----------------------------------------------------------

enum class TargetScale { normalized, raw };

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  std::optional<double> val_mape;
  double seconds = 0.0;
};

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t patience = 40;
  std::uint64_t seed = 0;
  bool shuffle = true;
  double clip_norm = 0.0;  // global gradient norm cap; 0 disables
  TargetScale target_scale = TargetScale::normalized;
  double mape_mask_threshold = 1e-3;
  std::size_t eval_batch_size = 64;
  /// Stop as soon as the epoch's mean training loss falls below this value.
  std::optional<double> target_train_loss;

  /// Replaces the monitored validation MAE (test hook).
  std::function<double(std::size_t epoch, double val_mae)> val_metric_hook;
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const;
};

struct TrainResult {
  FptnModel best_model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string stop_reason;
};

/// Runs the epoch loop from the model's current parameters. On divergence the
/// best model seen so far is returned with diverged set.
TrainResult train(FptnModel model, const ForecastDataset& data, const TrainConfig& config);

/// Raw-scale predictions for a batch in eval mode.
Tensor predict_raw(FptnModel& model, const Batch& batch, TargetScale scale, const NormStats& stats);

/// Metrics on the raw scale over a whole split.
MetricsReport evaluate_split(FptnModel& model, const SampleSet& split, TargetScale scale,
                             double mape_mask_threshold = 1e-3, std::size_t batch_size = 64);

/// Mean MAE loss in the training target scale, eval mode.
double split_loss(FptnModel& model, const SampleSet& split, TargetScale scale, std::size_t batch_size = 64);

/// Last-value baseline on the raw scale over a split.
MetricsReport evaluate_last_value(const SampleSet& split, double mape_mask_threshold = 1e-3);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

// ---- hyperparameter sweep ---------------------------------------------------

struct GridSpec {
  std::vector<std::size_t> d_model;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> heads;
  std::vector<double> lr;
  std::size_t size() const { return d_model.size() * layers.size() * heads.size() * lr.size(); }
};

struct SweepRow {
  std::size_t d_model = 0, layers = 0, heads = 0;
  double lr = 0.0;
  std::string status;  // ok | invalid | diverged
  double val_mae = 0.0, val_rmse = 0.0;
  std::optional<double> val_mape;
  double train_loss = 0.0;  // at the best validation epoch
  double min_train_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_run = 0;
  double seconds = 0.0;
  bool reference_optimum = false;
};

/// Trains every grid cell from `base` and ranks by validation MAE (invalid
/// cells last).
std::vector<SweepRow> grid_search(const ModelConfig& base, const GridSpec& grid, const ForecastDataset& data,
                                  const TrainConfig& config);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace fptn
