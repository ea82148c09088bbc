#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fptn/data.hpp"
#include "fptn/tensor.hpp"

namespace fptn {

inline constexpr std::size_t kStepsPerDay = 288;

/// One sensor's daily profile: Gaussian bumps centred at the given phases
/// (in steps within the daily cycle), scaled by amplitude.
struct SensorProfile {
  double amplitude = 100.0;
  std::vector<double> peak_phases{0.0};
  double peak_width = 24.0;  // standard deviation in steps
  double base_level = 0.0;   // added inside max(0, ...)
};

struct SyntheticSpec {
  std::string name = "synthetic";
  std::size_t steps = 2 * kStepsPerDay;
  std::size_t period = kStepsPerDay;
  std::vector<SensorProfile> sensors{SensorProfile{}};
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  int step_minutes = 5;
  Timestamp start = parse_timestamp("2024-01-01T00:00:00");

  /// Throws ConfigError unless steps >= 48, noise_std >= 0 and every
  /// profile is well formed.
  void validate() const;
};

/// value(n, t) = max(0, amplitude_n * max(0, base_n + sum_k bump_k(t)) + noise),
/// with bumps measured by circular distance on the daily cycle.
RawSeries generate(const SyntheticSpec& spec);

/// Sensors alternate between a morning and an evening peak half a day
/// apart; every fourth sensor carries both peaks.
SyntheticSpec two_phase_spec(std::size_t sensors, std::size_t steps, double noise_std = 0.0, std::uint64_t seed = 0);

/// One narrow peak per sensor, spread evenly over the day in random sensor
/// order. Before a peak every sensor is flat, so an hour of history does not
/// reveal when it arrives; the calendar and the sensor identity do.
SyntheticSpec time_varying_spec(std::size_t sensors, std::size_t steps, double noise_std = 2.0,
                                std::uint64_t seed = 0);

// ---- naive baselines --------------------------------------------------------

/// Repeats the last observed step: x [..., T] -> [..., K].
Tensor baseline_last_value(const Tensor& x, std::size_t horizon);

/// Mean of each time-of-day slot over the leading history steps.
class HistoricalAverage {
 public:
  /// Throws ConfigError when history_steps < period or exceeds the series.
  HistoricalAverage(const RawSeries& series, std::size_t history_steps, std::size_t period = kStepsPerDay);

  double forecast(std::size_t step, std::size_t sensor) const;
  /// [steps.size(), N]
  Tensor forecast(const std::vector<std::size_t>& steps) const;

 private:
  std::size_t period_;
  std::size_t sensors_;
  std::vector<double> slot_mean_;  // period x N
};

}  // namespace fptn
