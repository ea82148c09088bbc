#include "fptn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fptn/errors.hpp"

namespace fptn {

void SyntheticSpec::validate() const {
  if (steps < 48) throw ConfigError("synthetic series needs at least 48 steps");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (period < 1) throw ConfigError("period must be >= 1");
  if (sensors.empty()) throw ConfigError("synthetic spec has no sensors");
  if (step_minutes < 1) throw ConfigError("step_minutes must be positive");
  for (const auto& s : sensors) {
    if (!(s.peak_width > 0.0)) throw ConfigError("peak_width must be positive");
    if (!std::isfinite(s.amplitude) || !std::isfinite(s.base_level)) throw ConfigError("non-finite sensor profile");
  }
}

RawSeries generate(const SyntheticSpec& spec) {
  spec.validate();
  RawSeries out;
  out.steps = spec.steps;
  out.sensors = spec.sensors.size();
  out.meta = {spec.name, spec.start, spec.step_minutes};
  out.values.resize(out.steps * out.sensors);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double period = static_cast<double>(spec.period);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    const double slot = static_cast<double>(t % spec.period);
    for (std::size_t n = 0; n < out.sensors; ++n) {
      const auto& s = spec.sensors[n];
      double profile = s.base_level;
      for (double phase : s.peak_phases) {
        double dist = std::fmod(std::abs(slot - phase), period);
        dist = std::min(dist, period - dist);
        profile += std::exp(-0.5 * (dist / s.peak_width) * (dist / s.peak_width));
      }
      double v = s.amplitude * std::max(0.0, profile);
      if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
      out.values[t * out.sensors + n] = std::max(0.0, v);
    }
  }
  return out;
}

SyntheticSpec two_phase_spec(std::size_t sensors, std::size_t steps, double noise_std, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.name = "two_phase";
  spec.steps = steps;
  spec.noise_std = noise_std;
  spec.seed = seed;
  spec.sensors.clear();
  const double half = static_cast<double>(kStepsPerDay) / 2.0;
  for (std::size_t n = 0; n < sensors; ++n) {
    SensorProfile p;
    p.amplitude = 60.0 + 20.0 * static_cast<double>(n % 5);
    p.peak_width = 20.0 + 4.0 * static_cast<double>(n % 3);
    p.base_level = 0.2;
    const double shift = 6.0 * static_cast<double>(n / 2);
    if (n % 4 == 3) {
      p.peak_phases = {96.0 + shift, 96.0 + half + shift};
    } else {
      p.peak_phases = {(n % 2 == 0 ? 96.0 : 96.0 + half) + shift};
    }
    spec.sensors.push_back(p);
  }
  return spec;
}

SyntheticSpec time_varying_spec(std::size_t sensors, std::size_t steps, double noise_std, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.name = "time_varying";
  spec.steps = steps;
  spec.noise_std = noise_std;
  spec.seed = seed;
  spec.sensors.clear();
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  const double spacing = static_cast<double>(kStepsPerDay) / static_cast<double>(std::max<std::size_t>(sensors, 1));
  std::vector<std::size_t> slot(sensors);
  std::iota(slot.begin(), slot.end(), 0);
  std::shuffle(slot.begin(), slot.end(), rng);
  std::uniform_real_distribution<double> jitter(-spacing / 8.0, spacing / 8.0);
  std::uniform_real_distribution<double> amp(40.0, 120.0);
  for (std::size_t n = 0; n < sensors; ++n) {
    SensorProfile p;
    p.amplitude = amp(rng);
    p.peak_width = 6.0;
    p.base_level = 0.1;
    p.peak_phases = {spacing * static_cast<double>(slot[n]) + jitter(rng)};
    spec.sensors.push_back(p);
  }
  return spec;
}

Tensor baseline_last_value(const Tensor& x, std::size_t horizon) {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  const std::size_t rows = x.rows(), t = x.cols();
  Shape shape = x.shape();
  shape.back() = horizon;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < horizon; ++k) out[r * horizon + k] = x[r * t + t - 1];
  return out;
}

HistoricalAverage::HistoricalAverage(const RawSeries& series, std::size_t history_steps, std::size_t period)
    : period_(period), sensors_(series.sensors), slot_mean_(period * series.sensors, 0.0) {
  if (period < 1) throw ConfigError("period must be >= 1");
  if (history_steps < period) {
    throw ConfigError("historical average needs a full cycle of " + std::to_string(period) + " steps, got " +
                      std::to_string(history_steps));
  }
  if (history_steps > series.steps) throw ConfigError("history exceeds the series length");
  std::vector<std::size_t> count(period, 0);
  for (std::size_t t = 0; t < history_steps; ++t) {
    const std::size_t slot = t % period;
    ++count[slot];
    for (std::size_t n = 0; n < sensors_; ++n) slot_mean_[slot * sensors_ + n] += series.at(t, n);
  }
  for (std::size_t slot = 0; slot < period; ++slot)
    for (std::size_t n = 0; n < sensors_; ++n) slot_mean_[slot * sensors_ + n] /= static_cast<double>(count[slot]);
}

double HistoricalAverage::forecast(std::size_t step, std::size_t sensor) const {
  if (sensor >= sensors_) throw ConfigError("sensor index out of range");
  return slot_mean_[(step % period_) * sensors_ + sensor];
}

Tensor HistoricalAverage::forecast(const std::vector<std::size_t>& steps) const {
  Tensor out({steps.size(), sensors_});
  for (std::size_t i = 0; i < steps.size(); ++i)
    for (std::size_t n = 0; n < sensors_; ++n) out.at(i, n) = forecast(steps[i], n);
  return out;
}

}  // namespace fptn
