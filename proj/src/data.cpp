#include "fptn/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "fptn/binary_io.hpp"
#include "fptn/errors.hpp"
#include "json.hpp"

namespace fptn {

using nlohmann::json;
namespace chr = std::chrono;

// ---- timestamps -------------------------------------------------------------

Timestamp parse_timestamp(std::string_view text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  const std::string str(text);
  const int got = std::sscanf(str.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d", &y, &mo, &d, &sep, &h, &mi, &s);
  if (got < 3 || (got > 3 && got < 6) || (got >= 4 && sep != 'T' && sep != ' ')) {
    throw IngestionError("invalid ISO-8601 timestamp '" + str + "'");
  }
  const chr::year_month_day ymd{chr::year{y}, chr::month{static_cast<unsigned>(mo)},
                                chr::day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59) {
    throw IngestionError("timestamp out of range '" + str + "'");
  }
  return chr::sys_days{ymd} + chr::hours{h} + chr::minutes{mi} + chr::seconds{s};
}

std::string format_timestamp(Timestamp t) {
  const auto day = chr::floor<chr::days>(t);
  const chr::year_month_day ymd{day};
  const chr::hh_mm_ss<chr::seconds> tod{t - day};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(tod.hours().count()), static_cast<int>(tod.minutes().count()),
                static_cast<int>(tod.seconds().count()));
  return buf;
}

Timestamp RawSeries::time_at(std::size_t t) const {
  return meta.start + chr::minutes{static_cast<long long>(t) * meta.step_minutes};
}

void RawSeries::validate() const {
  if (sensors < 1) throw IngestionError("series has no sensors");
  if (steps < 1) throw IngestionError("series has no time steps");
  if (values.size() != steps * sensors) {
    throw IngestionError("series holds " + std::to_string(values.size()) + " values, expected " +
                         std::to_string(steps) + " x " + std::to_string(sensors));
  }
  if (meta.step_minutes < 1) throw IngestionError("step_minutes must be positive");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw IngestionError("missing or non-finite value at step " + std::to_string(i / sensors) + ", sensor " +
                           std::to_string(i % sensors));
    }
  }
}

// ---- metadata ---------------------------------------------------------------

DataFormat parse_data_format(std::string_view text) {
  if (text == "csv") return DataFormat::csv;
  if (text == "bin" || text == "binary") return DataFormat::binary;
  throw ConfigError("unknown data format '" + std::string(text) + "' (expected csv or bin)");
}

std::filesystem::path metadata_path_for(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".meta.json");
  return p;
}

std::string metadata_to_json(const SeriesMetadata& meta) {
  json j;
  j["name"] = meta.name;
  j["start_timestamp"] = format_timestamp(meta.start);
  j["step_minutes"] = meta.step_minutes;
  return j.dump();
}

SeriesMetadata metadata_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IngestionError(std::string("metadata is not valid JSON: ") + e.what());
  }
  for (const char* key : {"start_timestamp", "step_minutes", "name"}) {
    if (!j.contains(key)) throw IngestionError(std::string("metadata is missing '") + key + "'");
  }
  SeriesMetadata meta;
  try {
    meta.name = j.at("name").get<std::string>();
    meta.start = parse_timestamp(j.at("start_timestamp").get<std::string>());
    meta.step_minutes = j.at("step_minutes").get<int>();
  } catch (const json::exception& e) {
    throw IngestionError(std::string("metadata has a field of the wrong type: ") + e.what());
  }
  if (meta.step_minutes < 1) throw IngestionError("metadata step_minutes must be positive");
  return meta;
}

// ---- CSV --------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t begin = 0;
  while (true) {
    const auto comma = line.find(',', begin);
    cells.push_back(line.substr(begin, comma == std::string_view::npos ? std::string_view::npos : comma - begin));
    if (comma == std::string_view::npos) break;
    begin = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RawSeries load_csv(const std::filesystem::path& path, const std::filesystem::path& meta_path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open '" + path.string() + "'");
  RawSeries series;
  series.meta = metadata_from_json(read_file(meta_path));

  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw IngestionError(path.string() + ": empty file, expected a header row");
  ++line_no;
  const auto header = split_csv_line(line);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = trim(header[c]);
    if (name != "sensor_" + std::to_string(c)) {
      throw IngestionError(path.string() + ": line 1, column " + std::to_string(c + 1) + ": expected header 'sensor_" +
                           std::to_string(c) + "', found '" + std::string(name) + "'");
    }
  }
  series.sensors = header.size();

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != series.sensors) {
      throw IngestionError(path.string() + ": line " + std::to_string(line_no) + ": expected " +
                           std::to_string(series.sensors) + " columns, found " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = trim(cells[c]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw IngestionError(path.string() + ": line " + std::to_string(line_no) + ", column " +
                             std::to_string(c + 1) + " (sensor_" + std::to_string(c) + "): invalid value '" +
                             std::string(cell) + "'");
      }
      series.values.push_back(v);
    }
    ++series.steps;
  }
  series.validate();
  return series;
}

constexpr char kMagic[4] = {'F', 'P', 'T', 'N'};
constexpr std::uint16_t kBinaryVersion = 1;

RawSeries load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw IngestionError(path.string() + ": offset 0: bad magic, not an FPTN dataset");
  }
  const auto version = binary_io::read_le<std::uint16_t>(in);
  if (version != kBinaryVersion) {
    throw IngestionError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  RawSeries series;
  series.steps = binary_io::read_le<std::uint64_t>(in);
  series.sensors = binary_io::read_le<std::uint64_t>(in);
  const auto channels = binary_io::read_le<std::uint64_t>(in);
  if (channels != 1) throw IngestionError(path.string() + ": only C = 1 is supported, file has C = " +
                                          std::to_string(channels));
  if (series.steps == 0 || series.sensors == 0 || series.steps > (1ull << 34) / series.sensors) {
    throw IngestionError(path.string() + ": implausible extents in header");
  }
  series.values.resize(series.steps * series.sensors);
  for (auto& v : series.values) {
    try {
      v = binary_io::read_f64(in);
    } catch (const IngestionError&) {
      throw IngestionError(path.string() + ": offset " + std::to_string(static_cast<long long>(in.tellg())) +
                           ": truncated value block");
    }
  }
  series.meta = metadata_from_json(binary_io::read_bytes(in));
  series.validate();
  return series;
}

}  // namespace

RawSeries load_raw(const std::filesystem::path& path, DataFormat format,
                   const std::optional<std::filesystem::path>& metadata) {
  if (format == DataFormat::csv) return load_csv(path, metadata.value_or(metadata_path_for(path)));
  return load_binary(path);
}

void write_csv(const RawSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  for (std::size_t n = 0; n < series.sensors; ++n) out << (n ? "," : "") << "sensor_" << n;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < series.steps; ++t) {
    for (std::size_t n = 0; n < series.sensors; ++n) {
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, series.at(t, n));
      (void)ec;
      if (n) out << ',';
      out.write(buf, ptr - buf);
    }
    out << '\n';
  }
  std::ofstream meta(metadata_path_for(path));
  meta << metadata_to_json(series.meta) << '\n';
}

void write_binary(const RawSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  out.write(kMagic, 4);
  binary_io::write_le<std::uint16_t>(out, kBinaryVersion);
  binary_io::write_le<std::uint64_t>(out, series.steps);
  binary_io::write_le<std::uint64_t>(out, series.sensors);
  binary_io::write_le<std::uint64_t>(out, 1);
  for (double v : series.values) binary_io::write_f64(out, v);
  binary_io::write_bytes(out, metadata_to_json(series.meta));
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---- normalization ----------------------------------------------------------

NormStats fit_zscore(std::span<const double> values) {
  if (values.empty()) throw NormalizationError("cannot fit normalization on an empty series");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  if (!(sd > 0.0)) throw NormalizationError("training values are constant; standard deviation is zero");
  return {mean, sd};
}

void apply_zscore(std::span<double> values, const NormStats& s) {
  for (auto& v : values) v = apply_zscore(v, s);
}

void invert_zscore(std::span<double> values, const NormStats& s) {
  for (auto& v : values) v = invert_zscore(v, s);
}

// ---- time features ----------------------------------------------------------

std::vector<double> build_time_features(Timestamp start, int step_minutes, std::size_t window_start,
                                        std::size_t steps) {
  std::vector<double> tf(3 * steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const Timestamp t = start + chr::minutes{static_cast<long long>(window_start + i) * step_minutes};
    const auto day = chr::floor<chr::days>(t);
    const chr::weekday wd{day};
    const chr::hh_mm_ss<chr::seconds> tod{t - day};
    tf[i] = static_cast<double>(wd.iso_encoding() - 1) / 6.0;
    tf[steps + i] = static_cast<double>(tod.hours().count()) / 23.0;
    tf[2 * steps + i] = static_cast<double>(tod.minutes().count()) / 55.0;
  }
  return tf;
}

// ---- windows ----------------------------------------------------------------

SampleSet::SampleSet(std::shared_ptr<const RawSeries> series, NormStats stats, std::size_t input_steps,
                     std::size_t horizon, std::vector<std::size_t> starts)
    : series_(std::move(series)),
      stats_(stats),
      input_steps_(input_steps),
      horizon_(horizon),
      starts_(std::move(starts)) {}

Sample SampleSet::sample(std::size_t i) const {
  const std::size_t t0 = starts_.at(i);
  const std::size_t n_sensors = series_->sensors, T = input_steps_, K = horizon_;
  Sample s;
  s.start = t0;
  s.x = Tensor({n_sensors, T});
  s.y = Tensor({n_sensors, K});
  s.y_raw = Tensor({n_sensors, K});
  s.tf = Tensor({n_sensors, 3 * T});
  const auto tf_row = build_time_features(series_->meta.start, series_->meta.step_minutes, t0, T);
  for (std::size_t n = 0; n < n_sensors; ++n) {
    for (std::size_t j = 0; j < T; ++j) s.x.at(n, j) = apply_zscore(series_->at(t0 + j, n), stats_);
    for (std::size_t j = 0; j < K; ++j) {
      const double raw = series_->at(t0 + T + j, n);
      s.y_raw.at(n, j) = raw;
      s.y.at(n, j) = apply_zscore(raw, stats_);
    }
    std::copy(tf_row.begin(), tf_row.end(), s.tf.raw() + n * 3 * T);
  }
  return s;
}

SampleSet SampleSet::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > starts_.size()) throw WindowingError("slice out of range");
  return SampleSet(series_, stats_, input_steps_, horizon_,
                   std::vector<std::size_t>(starts_.begin() + static_cast<std::ptrdiff_t>(begin),
                                            starts_.begin() + static_cast<std::ptrdiff_t>(end)));
}

SampleSet make_windows(std::shared_ptr<const RawSeries> series, const NormStats& stats, std::size_t input_steps,
                       std::size_t horizon) {
  if (input_steps < 1 || horizon < 1) throw WindowingError("T and K must be at least 1");
  const std::size_t count = window_count(series->steps, input_steps, horizon);
  if (count == 0) {
    throw WindowingError("series of " + std::to_string(series->steps) + " steps is shorter than T + K = " +
                         std::to_string(input_steps + horizon));
  }
  std::vector<std::size_t> starts(count);
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  return SampleSet(std::move(series), stats, input_steps, horizon, std::move(starts));
}

// ---- splits -----------------------------------------------------------------

SplitRatio SplitRatio::from_parts(double train, double val, double test) {
  if (!(train > 0.0) || !(val > 0.0) || !(test > 0.0)) throw ConfigError("split ratio parts must be positive");
  const double total = train + val + test;
  return {train / total, val / total, test / total};
}

SplitRatio SplitRatio::parse(std::string_view text) {
  double parts[3];
  std::size_t begin = 0;
  for (int i = 0; i < 3; ++i) {
    const auto colon = text.find(':', begin);
    if ((i < 2) == (colon == std::string_view::npos)) {
      throw ConfigError("split ratio '" + std::string(text) + "' must look like 6:2:2");
    }
    const auto part = text.substr(begin, i < 2 ? colon - begin : std::string_view::npos);
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), parts[i]);
    if (ec != std::errc{} || ptr != part.data() + part.size()) {
      throw ConfigError("split ratio '" + std::string(text) + "' has a non-numeric part");
    }
    begin = colon + 1;
  }
  return from_parts(parts[0], parts[1], parts[2]);
}

std::string SplitRatio::str() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g:%g:%g", train * 10.0, val * 10.0, test * 10.0);
  return buf;
}

SplitCounts split_counts(std::size_t total, const SplitRatio& ratio) {
  // The small epsilon absorbs representation error in ratios like 0.6 * 10.
  auto floor_of = [](double x) { return static_cast<std::size_t>(std::floor(x + 1e-9)); };
  SplitCounts c;
  c.train = floor_of(ratio.train * static_cast<double>(total));
  c.val = floor_of(ratio.val * static_cast<double>(total));
  if (c.train + c.val > total) throw ConfigError("split ratio overflows the sample count");
  c.test = total - c.train - c.val;
  if (c.train == 0 || c.val == 0 || c.test == 0) {
    throw ConfigError("split of " + std::to_string(total) + " samples by " + ratio.str() +
                      " leaves an empty partition (" + std::to_string(c.train) + "/" + std::to_string(c.val) + "/" +
                      std::to_string(c.test) + ")");
  }
  return c;
}

Splits split_samples(const SampleSet& samples, const SplitRatio& ratio) {
  const auto c = split_counts(samples.size(), ratio);
  return {samples.slice(0, c.train), samples.slice(c.train, c.train + c.val),
          samples.slice(c.train + c.val, samples.size())};
}

// ---- batches ----------------------------------------------------------------

Batch gather_batch(const SampleSet& set, std::span<const std::size_t> indices) {
  const std::size_t b = indices.size(), n = set.sensors(), T = set.input_steps(), K = set.horizon();
  Batch batch;
  batch.x = Tensor({b, n, T});
  batch.y = Tensor({b, n, K});
  batch.y_raw = Tensor({b, n, K});
  batch.tf = Tensor({b, n, 3 * T});
  batch.indices.assign(indices.begin(), indices.end());
  for (std::size_t i = 0; i < b; ++i) {
    const Sample s = set.sample(indices[i]);
    std::copy(s.x.data().begin(), s.x.data().end(), batch.x.raw() + i * n * T);
    std::copy(s.y.data().begin(), s.y.data().end(), batch.y.raw() + i * n * K);
    std::copy(s.y_raw.data().begin(), s.y_raw.data().end(), batch.y_raw.raw() + i * n * K);
    std::copy(s.tf.data().begin(), s.tf.data().end(), batch.tf.raw() + i * n * 3 * T);
  }
  return batch;
}

std::vector<std::size_t> epoch_order(std::size_t count, bool shuffle, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

BatchStream::BatchStream(const SampleSet& set, std::size_t batch_size, std::vector<std::size_t> order)
    : set_(&set), batch_size_(batch_size), order_(std::move(order)) {
  if (batch_size_ < 1) throw ConfigError("batch_size must be at least 1");
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  Batch b = gather_batch(*set_, std::span<const std::size_t>(order_).subspan(cursor_, end - cursor_));
  cursor_ = end;
  return b;
}

std::size_t BatchStream::batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

BatchStream iterate_batches(const SampleSet& set, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                            std::size_t epoch) {
  return BatchStream(set, batch_size, epoch_order(set.size(), shuffle, seed, epoch));
}

// ---- assembled dataset ------------------------------------------------------

std::size_t training_span(std::size_t train_windows, std::size_t input_steps, std::size_t horizon) {
  return train_windows + input_steps + horizon - 1;
}

ForecastDataset prepare_dataset(std::shared_ptr<const RawSeries> series, std::size_t input_steps,
                                std::size_t horizon, const SplitRatio& ratio, const std::optional<NormStats>& stats) {
  ForecastDataset ds;
  ds.series = series;
  ds.ratio = ratio;
  ds.input_steps = input_steps;
  ds.horizon = horizon;
  const std::size_t total = window_count(series->steps, input_steps, horizon);
  if (total == 0) {
    throw WindowingError("series of " + std::to_string(series->steps) + " steps is shorter than T + K = " +
                         std::to_string(input_steps + horizon));
  }
  const auto counts = split_counts(total, ratio);
  if (stats) {
    ds.stats = *stats;
  } else {
    const std::size_t span = training_span(counts.train, input_steps, horizon);
    ds.stats = fit_zscore(std::span<const double>(series->values).first(span * series->sensors));
  }
  ds.splits = split_samples(make_windows(series, ds.stats, input_steps, horizon), ratio);
  return ds;
}

}  // namespace fptn
