#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fptn/tensor.hpp"

namespace fptn {

// Calendar instants are civil times without a zone, carried as sys_seconds.
using Timestamp = std::chrono::sys_seconds;

Timestamp parse_timestamp(std::string_view iso8601);
std::string format_timestamp(Timestamp t);

struct SeriesMetadata {
  std::string name;
  Timestamp start{};
  int step_minutes = 5;
};

/// Observed traffic tensor (steps x sensors x 1), stored row-major by step.
struct RawSeries {
  std::size_t steps = 0;
  std::size_t sensors = 0;
  std::vector<double> values;
  SeriesMetadata meta;

  double at(std::size_t t, std::size_t n) const { return values[t * sensors + n]; }
  Timestamp time_at(std::size_t t) const;
  void validate() const;
};

enum class DataFormat { csv, binary };

DataFormat parse_data_format(std::string_view text);

/// Sidecar metadata for a CSV file: data.csv -> data.meta.json.
std::filesystem::path metadata_path_for(const std::filesystem::path& csv);

RawSeries load_raw(const std::filesystem::path& path, DataFormat format,
                   const std::optional<std::filesystem::path>& metadata = std::nullopt);
void write_csv(const RawSeries& series, const std::filesystem::path& path);
void write_binary(const RawSeries& series, const std::filesystem::path& path);

std::string metadata_to_json(const SeriesMetadata& meta);
SeriesMetadata metadata_from_json(std::string_view text);

/// FNV-1a over the file bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

// ---- normalization ----------------------------------------------------------

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Population mean and standard deviation. Throws NormalizationError when
/// the input is empty or constant.
NormStats fit_zscore(std::span<const double> values);
inline double apply_zscore(double x, const NormStats& s) { return (x - s.mean) / s.std; }
inline double invert_zscore(double z, const NormStats& s) { return z * s.std + s.mean; }
void apply_zscore(std::span<double> values, const NormStats& s);
void invert_zscore(std::span<double> values, const NormStats& s);

// ---- time features ----------------------------------------------------------

/// [D_1..D_T, H_1..H_T, M_1..M_T] for the T steps starting at
/// start + window_start * step. D = weekday/6 (Monday 0), H = hour/23,
/// M = minute/55.
std::vector<double> build_time_features(Timestamp start, int step_minutes, std::size_t window_start,
                                        std::size_t steps);

// ---- windows ----------------------------------------------------------------

struct Sample {
  Tensor x;      // N x T, normalized
  Tensor y;      // N x K, normalized
  Tensor y_raw;  // N x K, raw units
  Tensor tf;     // N x 3T, identical rows
  std::size_t start = 0;
};

inline std::size_t window_count(std::size_t total_steps, std::size_t input_steps, std::size_t horizon) {
  return total_steps >= input_steps + horizon ? total_steps - input_steps - horizon + 1 : 0;
}

/// Chronological sliding windows over a shared series. Samples are
/// materialized on demand, so a set over a full dataset stays small.
class SampleSet {
 public:
  SampleSet() = default;
  SampleSet(std::shared_ptr<const RawSeries> series, NormStats stats, std::size_t input_steps, std::size_t horizon,
            std::vector<std::size_t> starts);

  std::size_t size() const { return starts_.size(); }
  bool empty() const { return starts_.empty(); }
  std::size_t input_steps() const { return input_steps_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t sensors() const { return series_ ? series_->sensors : 0; }
  const NormStats& stats() const { return stats_; }
  const RawSeries& series() const { return *series_; }
  std::size_t start(std::size_t i) const { return starts_.at(i); }

  Sample sample(std::size_t i) const;
  SampleSet slice(std::size_t begin, std::size_t end) const;

 private:
  std::shared_ptr<const RawSeries> series_;
  NormStats stats_;
  std::size_t input_steps_ = 0;
  std::size_t horizon_ = 0;
  std::vector<std::size_t> starts_;
};

/// Stride-1 windows: X covers [t, t+T), Y covers [t+T, t+T+K).
SampleSet make_windows(std::shared_ptr<const RawSeries> series, const NormStats& stats, std::size_t input_steps,
                       std::size_t horizon);

struct SplitRatio {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  /// Accepts "6:2:2"-style ratios (any positive parts, rescaled to sum to 1).
  static SplitRatio parse(std::string_view text);
  static SplitRatio from_parts(double train, double val, double test);
  std::string str() const;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// floor(r * total) for train and val, remainder to test.
SplitCounts split_counts(std::size_t total, const SplitRatio& ratio);

struct Splits {
  SampleSet train, val, test;
};

Splits split_samples(const SampleSet& samples, const SplitRatio& ratio);

// ---- batches ----------------------------------------------------------------

struct Batch {
  Tensor x;      // B x N x T
  Tensor y;      // B x N x K
  Tensor y_raw;  // B x N x K
  Tensor tf;     // B x N x 3T
  std::vector<std::size_t> indices;
  std::size_t size() const { return indices.size(); }
};

Batch gather_batch(const SampleSet& set, std::span<const std::size_t> indices);

/// Sample order for one epoch: identity, or a permutation seeded by
/// (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, bool shuffle, std::uint64_t seed, std::size_t epoch);

class BatchStream {
 public:
  BatchStream(const SampleSet& set, std::size_t batch_size, std::vector<std::size_t> order);
  std::optional<Batch> next();
  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const SampleSet* set_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// The permutation is drawn up front; the last partial batch is kept.
BatchStream iterate_batches(const SampleSet& set, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                            std::size_t epoch = 0);

// ---- assembled dataset ------------------------------------------------------

struct ForecastDataset {
  std::shared_ptr<const RawSeries> series;
  NormStats stats;
  SplitRatio ratio;
  std::size_t input_steps = 0;
  std::size_t horizon = 0;
  Splits splits;
};

/// Number of leading raw steps touched by the training windows.
std::size_t training_span(std::size_t train_windows, std::size_t input_steps, std::size_t horizon);

/// Windows the whole series, splits chronologically and fits normalization
/// on the raw steps covered by the training windows only. A stats override
/// (from a checkpoint) skips the fit.
ForecastDataset prepare_dataset(std::shared_ptr<const RawSeries> series, std::size_t input_steps,
                                std::size_t horizon, const SplitRatio& ratio,
                                const std::optional<NormStats>& stats = std::nullopt);

}  // namespace fptn
