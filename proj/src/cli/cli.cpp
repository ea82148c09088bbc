#include "fptn/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "fptn/checkpoint.hpp"
#include "fptn/errors.hpp"
#include "fptn/parallel.hpp"
#include "fptn/reference.hpp"
#include "fptn/run_config.hpp"
#include "fptn/synthetic.hpp"
#include "fptn/training.hpp"
#include "json.hpp"

namespace fptn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

RunDirLock::RunDirLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    path_.clear();
    throw StateError("run directory '" + dir.string() + "' is locked by another process (remove " +
                     (dir / ".lock").string() + " if stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunDirLock::~RunDirLock() {
  if (!path_.empty()) {
    std::error_code ec;
    fs::remove(path_, ec);
  }
}

std::size_t parse_window(const std::string& text, int step_minutes) {
  std::size_t value = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || value == 0) throw ConfigError("invalid window '" + text + "'");
  const std::string unit(ptr, end);
  std::size_t minutes = 0;
  if (unit.empty()) return value;
  if (unit == "h") minutes = value * 60;
  else if (unit == "d") minutes = value * 24 * 60;
  else throw ConfigError("invalid window unit in '" + text + "' (use steps, h or d)");
  if (minutes % static_cast<std::size_t>(step_minutes) != 0)
    throw ConfigError("window '" + text + "' is not a whole number of steps");
  return minutes / static_cast<std::size_t>(step_minutes);
}

namespace {

std::shared_ptr<RawSeries> load_dataset_arg(const std::string& path, const std::string& format,
                                            const std::string& metadata) {
  const fs::path p(path);
  const DataFormat f = !format.empty() ? parse_data_format(format)
                       : p.extension() == ".csv" ? DataFormat::csv
                                                 : DataFormat::binary;
  std::optional<fs::path> meta;
  if (!metadata.empty()) meta = metadata;
  return std::make_shared<RawSeries>(load_raw(p, f, meta));
}

void check_compatible(const Checkpoint& ck, const RawSeries& series) {
  const auto& c = ck.model.config();
  if (c.num_sensors != series.sensors) {
    throw CompatibilityError("checkpoint expects N=" + std::to_string(c.num_sensors) + " sensors but dataset '" +
                             series.meta.name + "' has N=" + std::to_string(series.sensors));
  }
}

Splits checkpoint_splits(const Checkpoint& ck, std::shared_ptr<const RawSeries> series) {
  const auto& c = ck.model.config();
  return split_samples(make_windows(std::move(series), ck.stats, c.input_steps, c.horizon), ck.ratio);
}

const SampleSet& pick_split(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (train, val or test)");
}

// Shared by train and evaluate so both report the same numbers.
MetricsReport evaluate_checkpoint(Checkpoint& ck, std::shared_ptr<const RawSeries> series, const std::string& split) {
  check_compatible(ck, *series);
  const Splits s = checkpoint_splits(ck, std::move(series));
  return evaluate_split(ck.model, pick_split(s, split), TargetScale::normalized);
}

std::string summary_line(const RawSeries& s) {
  return std::to_string(s.sensors) + " sensors, " + std::to_string(s.steps) + " steps, " +
         format_timestamp(s.time_at(0)) + " to " + format_timestamp(s.time_at(s.steps - 1)) + " (" +
         std::to_string(s.meta.step_minutes) + " min)";
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string fmt_optional(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

void apply_full_protocol(RunConfig& cfg, std::ostream& err) {
  namespace r = reference;
  cfg.model.input_steps = r::kInputSteps;
  cfg.model.horizon = r::kHorizon;
  cfg.train.epochs = r::kEpochs;
  // Smoke runs of the full path can shorten the budget.
  if (const char* e = std::getenv("FPTN_FULL_EPOCHS")) cfg.train.epochs = std::max(1, std::atoi(e));
  cfg.train.batch_size = r::kBatchSize;
  cfg.train.patience = r::kPatience;
  cfg.dataset.split_ratio = SplitRatio::parse("6:2:2");
  err << "full protocol: T=K=12, " << cfg.train.epochs << " epochs, batch 64, patience 40, split 6:2:2\n";
}

void require_reference_dataset(const RawSeries& series, std::ostream& err) {
  const auto* summary = reference::find_dataset(series.meta.name);
  if (!summary) {
    throw ConfigError("--full needs a dataset named PeMSD3, PeMSD4, PeMSD7 or PeMSD8 in its metadata, got '" +
                      series.meta.name + "'");
  }
  if (summary->sensors != series.sensors || summary->steps != series.steps) {
    err << "warning: " << summary->name << " reference shape is " << summary->sensors << " sensors, "
        << summary->steps << " steps; dataset has " << series.sensors << " sensors, " << series.steps << " steps\n";
  }
}

json full_comparison(const RawSeries& series, const MetricsReport& test, std::ostream& out) {
  const auto* summary = reference::find_dataset(series.meta.name);
  const auto* score = reference::find_score(series.meta.name);
  json j{{"dataset", series.meta.name},
         {"shape", {{"sensors", series.sensors}, {"steps", series.steps}}},
         {"reference_shape", {{"sensors", summary->sensors}, {"steps", summary->steps}}},
         {"measured", {{"mae", test.mae}, {"rmse", test.rmse}, {"mape", test.mape ? json(*test.mape) : json()}}},
         {"reference", {{"mae", score->mae}, {"rmse", score->rmse}, {"mape", score->mape}}}};
  out << "metric  measured      reference\n";
  out << "MAE     " << std::setw(12) << test.mae << "  " << score->mae << "\n";
  out << "RMSE    " << std::setw(12) << test.rmse << "  " << score->rmse << "\n";
  out << "MAPE    " << std::setw(12) << (test.mape ? fmt_double(*test.mape) : "n/a") << "  " << score->mape << "\n";
  return j;
}

// ---- commands ---------------------------------------------------------------

struct IngestArgs {
  std::string input, format, output, metadata;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out) {
  const auto series = load_dataset_arg(a.input, a.format, a.metadata);
  write_binary(*series, a.output);
  out << summary_line(*series) << "\n";
  if (const auto* ref = reference::find_dataset(series->meta.name)) {
    const bool match = ref->sensors == series->sensors && ref->steps == series->steps;
    out << (match ? "matches " : "differs from ") << ref->name << " reference shape (" << ref->sensors
        << " sensors, " << ref->steps << " steps)\n";
  }
  out << "checksum " << hex64(file_checksum(a.output)) << "\n";
  return kSuccess;
}

struct TrainArgs {
  std::string config;
  bool full = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(a.config);
  if (a.full) apply_full_protocol(cfg, err);
  const auto series = load_series(cfg.dataset);
  if (a.full) require_reference_dataset(*series, err);
  const ModelConfig mc = cfg.model_config(series->sensors);
  mc.validate();
  TrainConfig tc = cfg.train_config();
  tc.validate();
  const ForecastDataset data = prepare_dataset(series, mc.input_steps, mc.horizon, cfg.dataset.split_ratio);

  RunDirLock lock(cfg.output_dir);
  write_text(cfg.output_dir / "config.json", cfg.to_json().dump(2) + "\n");
  tc.on_epoch = [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_mae " << r.val_mae << " (" << std::fixed
        << std::setprecision(2) << r.seconds << "s)" << std::defaultfloat << std::setprecision(6) << "\n";
  };
  TrainResult res = train(FptnModel(mc), data, tc);
  write_history_csv(res.history, cfg.output_dir / "history.csv");
  if (res.best_epoch == 0) {
    err << "training diverged before any epoch completed\n";
    return kVerificationFailure;
  }

  Checkpoint ck{std::move(res.best_model), data.stats, data.ratio, series->meta.name};
  const fs::path ckpt = cfg.output_dir / "best.ckpt";
  save_checkpoint(ck, ckpt);
  Checkpoint saved = load_checkpoint(ckpt);
  const MetricsReport test = evaluate_checkpoint(saved, series, "test");
  const MetricsReport baseline = evaluate_last_value(data.splits.test);

  json summary{{"best_epoch", res.best_epoch},
               {"epochs_run", res.history.size()},
               {"stop_reason", res.stop_reason},
               {"diverged", res.diverged},
               {"best_val_mae", res.best_val_mae},
               {"test", json::parse(metrics_to_json(test))},
               {"last_value_test", json::parse(metrics_to_json(baseline))}};
  if (a.full) summary["comparison"] = full_comparison(*series, test, err);
  write_text(cfg.output_dir / "metrics.json", summary.dump(2) + "\n");
  out << metrics_to_json(test) << "\n";
  if (res.diverged) {
    err << "training diverged (" << res.stop_reason << "); kept the best checkpoint from epoch " << res.best_epoch
        << "\n";
    return kVerificationFailure;
  }
  return kSuccess;
}

struct DatasetArgs {
  std::string dataset, format, metadata;
};

struct EvaluateArgs {
  std::string checkpoint;
  DatasetArgs data;
  std::string split = "test";
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto series = load_dataset_arg(a.data.dataset, a.data.format, a.data.metadata);
  out << metrics_to_json(evaluate_checkpoint(ck, series, a.split)) << "\n";
  return kSuccess;
}

struct PredictArgs {
  std::string checkpoint;
  DatasetArgs data;
  std::size_t sensor = 0;
  std::string window = "1d";
  std::size_t offset = 0;
  std::size_t step = 1;
  std::string output;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto series = load_dataset_arg(a.data.dataset, a.data.format, a.data.metadata);
  check_compatible(ck, *series);
  const auto& c = ck.model.config();
  if (a.sensor >= series->sensors) {
    throw ConfigError("sensor " + std::to_string(a.sensor) + " out of range (dataset has " +
                      std::to_string(series->sensors) + " sensors)");
  }
  if (a.step < 1 || a.step > c.horizon)
    throw ConfigError("--step must lie in [1, " + std::to_string(c.horizon) + "]");
  const std::size_t window = parse_window(a.window, series->meta.step_minutes);
  const Splits s = checkpoint_splits(ck, series);
  if (a.offset + window > s.test.size()) {
    throw ConfigError("window of " + std::to_string(window) + " steps at offset " + std::to_string(a.offset) +
                      " exceeds the test split (" + std::to_string(s.test.size()) + " windows)");
  }

  std::ofstream file;
  if (!a.output.empty()) {
    file.open(a.output);
    if (!file) throw ConfigError("cannot write '" + a.output + "'");
  }
  std::ostream& csv = a.output.empty() ? out : file;
  csv << "timestamp,ground_truth,prediction\n";
  const std::size_t chunk = 64;
  for (std::size_t begin = a.offset; begin < a.offset + window; begin += chunk) {
    const std::size_t end = std::min(begin + chunk, a.offset + window);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const Batch batch = gather_batch(s.test, idx);
    const Tensor pred = predict_raw(ck.model, batch, TargetScale::normalized, ck.stats);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t t = s.test.start(idx[b]) + c.input_steps + a.step - 1;
      csv << format_timestamp(series->time_at(t)) << ',' << fmt_double(series->at(t, a.sensor)) << ','
          << fmt_double(pred.at(b, a.sensor, a.step - 1)) << '\n';
    }
  }
  return kSuccess;
}

struct GradcheckArgs {
  std::string config;
  std::size_t sensors = 3;
  std::string corrupt_group;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  ModelConfig mc;
  mc.num_sensors = a.sensors;
  mc.input_steps = 4;
  mc.horizon = 2;
  mc.d_model = 8;
  mc.heads = 2;
  mc.layers = 1;
  mc.seed = 0;
  if (!a.config.empty()) {
    const RunConfig cfg = load_run_config(a.config);
    mc = cfg.model_config(a.sensors);
  }
  mc.allow_empty_stack = true;
  if (mc.num_sensors > 4 || mc.d_model > 16) {
    throw ConfigError("gradcheck needs a tiny config (N <= 4, d_model <= 16), got N=" +
                      std::to_string(mc.num_sensors) + ", d_model=" + std::to_string(mc.d_model));
  }
  mc.validate();

  const auto t0 = std::chrono::steady_clock::now();
  FptnModel model(mc);
  std::mt19937_64 rng(mc.seed ^ 0x9e3779b97f4a7c15ULL);
  auto uniform = [&](Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = d(rng);
    return t;
  };
  const std::size_t batch = 2, n = mc.num_sensors, t = mc.input_steps;
  auto time_features = [&] {
    Tensor tf({batch, n, 3 * t});
    std::uniform_int_distribution<std::size_t> start(0, 7 * kStepsPerDay);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto row = build_time_features(parse_timestamp("2024-01-01"), 5, start(rng), t);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < 3 * t; ++j) tf.at(b, s, j) = row[j];
    }
    return tf;
  };
  {
    Tape tape;
    model.forward(tape, uniform({batch, n, t}, -1.0, 1.0), time_features(), Mode::train);
  }
  const Tensor x = uniform({batch, n, t}, -1.0, 1.0), tf = time_features(),
               y = uniform({batch, n, mc.horizon}, -2.0, 2.0);

  const auto params = model.parameters();
  bool known = a.corrupt_group.empty();
  for (const auto& p : params) known = known || p.name == a.corrupt_group;
  if (!known) throw ConfigError("no parameter group named '" + a.corrupt_group + "'");
  GradCheckOptions opts;
  if (!a.corrupt_group.empty()) {
    opts.tamper = [&](const std::string& name, Tensor& g) {
      if (name == a.corrupt_group) g[0] += 1.0;
    };
  }

  std::map<std::string, double> worst;
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto report = finite_diff_check(
        [&](Tape& tape, std::span<const Var> p) {
          return mae_loss(model.forward_with(tape, p, x, tf, mode), tape.constant(y));
        },
        params, opts);
    for (const auto& e : report.entries) worst[e.name] = std::max(worst[e.name], e.max_rel_error);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  out << "config N=" << mc.num_sensors << " T=" << mc.input_steps << " K=" << mc.horizon << " d_model=" << mc.d_model
      << " h=" << mc.heads << " L=" << mc.layers << "\n";
  std::string offender;
  double max_err = 0.0;
  for (const auto& p : params) {
    const double e = worst[p.name];
    out << std::left << std::setw(24) << p.name << ' ' << std::scientific << std::setprecision(3) << e
        << std::defaultfloat << std::setprecision(6) << '\n';
    if (e > max_err) {
      max_err = e;
      offender = p.name;
    }
  }
  const bool pass = max_err < opts.tolerance;
  out << (pass ? "PASS" : "FAIL") << " max relative error " << std::scientific << std::setprecision(3) << max_err
      << std::defaultfloat << std::setprecision(6) << " (tolerance " << opts.tolerance << ")";
  if (!pass) out << " in " << offender;
  out << ", " << std::fixed << std::setprecision(2) << seconds << "s\n" << std::defaultfloat << std::setprecision(6);
  return pass ? kSuccess : kVerificationFailure;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    T v{};
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size())
      throw ConfigError("invalid value '" + item + "' for grid key '" + key + "'");
    values.push_back(v);
  }
  if (values.empty()) throw ConfigError("grid key '" + key + "' has no values");
  return values;
}

GridSpec parse_grid(const std::string& text, const RunConfig& cfg) {
  GridSpec g{{cfg.model.d_model}, {cfg.model.layers}, {cfg.model.heads}, {cfg.train.lr}};
  auto assign = [&](const std::string& key, const std::string& values) {
    if (key == "d_model") g.d_model = parse_list<std::size_t>(key, values);
    else if (key == "L" || key == "layers") g.layers = parse_list<std::size_t>(key, values);
    else if (key == "h" || key == "heads") g.heads = parse_list<std::size_t>(key, values);
    else if (key == "lr") g.lr = parse_list<double>(key, values);
    else throw ConfigError("unknown grid key '" + key + "' (d_model, L, h, lr)");
  };
  if (fs::exists(text)) {
    std::ifstream in(text);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("grid file is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw ConfigError("grid file must hold an object of arrays");
    for (const auto& [key, arr] : j.items()) {
      if (!arr.is_array()) throw ConfigError("grid key '" + key + "' must map to an array");
      std::string joined;
      for (const auto& v : arr) joined += (joined.empty() ? "" : ",") + v.dump();
      assign(key, joined);
    }
    return g;
  }
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid entry '" + part + "' must look like key=v1,v2");
    assign(part.substr(0, eq), part.substr(eq + 1));
  }
  return g;
}

struct SweepArgs {
  std::string config, grid;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(a.config);
  const GridSpec grid = parse_grid(a.grid, cfg);
  const auto series = load_series(cfg.dataset);
  const ModelConfig base = cfg.model_config(series->sensors);
  const ForecastDataset data = prepare_dataset(series, base.input_steps, base.horizon, cfg.dataset.split_ratio);
  RunDirLock lock(cfg.output_dir);
  err << "sweeping " << grid.size() << " cells\n";
  const auto rows = grid_search(base, grid, data, cfg.train_config());
  const fs::path csv = cfg.output_dir / "sweep.csv";
  write_sweep_csv(rows, csv);
  std::ifstream in(csv);
  out << in.rdbuf();
  return kSuccess;
}

int cmd_ablation(const std::string& config, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(config);
  const auto series = load_series(cfg.dataset);
  const ModelConfig base = cfg.model_config(series->sensors);
  const ForecastDataset data = prepare_dataset(series, base.input_steps, base.horizon, cfg.dataset.split_ratio);
  RunDirLock lock(cfg.output_dir);

  struct Row {
    const reference::AblationScore* ref;
    MetricsReport val, test;
    std::size_t epochs = 0;
    double seconds = 0.0;
    bool diverged = false;
  };
  std::vector<Row> rows;
  for (const auto& ref : reference::kAblation) {
    ModelConfig mc = base;
    mc.use_time_embedding = ref.time_embedding;
    mc.positional_mode = parse_positional_mode(ref.positional);
    err << "variant time_embedding=" << (ref.time_embedding ? "on" : "off") << " positional=" << ref.positional
        << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train(FptnModel(mc), data, cfg.train_config());
    Row r{&ref, {}, {}, res.history.size(), 0.0, res.diverged};
    r.val = evaluate_split(res.best_model, data.splits.val, TargetScale::normalized);
    r.test = evaluate_split(res.best_model, data.splits.test, TargetScale::normalized);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(r);
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return rows[i].val.mae < rows[j].val.mae; });
  std::vector<std::size_t> rank(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i + 1;

  std::ostringstream csv;
  csv << "time_embedding,positional,val_mae,val_rmse,val_mape,test_mae,test_rmse,test_mape,rank,diverged,epochs_run,"
         "seconds,reference_mae,reference_rmse,reference_mape\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    csv << (r.ref->time_embedding ? "on" : "off") << ',' << r.ref->positional << ',' << fmt_double(r.val.mae) << ','
        << fmt_double(r.val.rmse) << ',' << fmt_optional(r.val.mape) << ',' << fmt_double(r.test.mae) << ','
        << fmt_double(r.test.rmse) << ',' << fmt_optional(r.test.mape) << ',' << rank[i] << ','
        << (r.diverged ? "true" : "false") << ',' << r.epochs << ',' << fmt_double(r.seconds) << ','
        << fmt_double(r.ref->mae) << ',' << fmt_double(r.ref->rmse) << ',' << fmt_double(r.ref->mape) << '\n';
  }
  write_text(cfg.output_dir / "ablation.csv", csv.str());
  out << csv.str();
  return kSuccess;
}

struct SynthArgs {
  std::string kind = "two_phase", output, format;
  std::size_t sensors = 4, steps = 0;
  double days = 7.0;
  double noise = -1.0;
  std::uint64_t seed = 0;
  std::string name;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SyntheticSource src;
  src.kind = a.kind;
  src.sensors = a.sensors;
  src.steps = a.steps ? a.steps : static_cast<std::size_t>(std::llround(a.days * kStepsPerDay));
  src.noise_std = a.noise >= 0.0 ? a.noise : (a.kind == "time_varying" ? 2.0 : 0.0);
  src.seed = a.seed;
  SyntheticSpec spec = synthetic_spec(src);
  if (!a.name.empty()) spec.name = a.name;
  const RawSeries series = generate(spec);
  const fs::path p(a.output);
  const DataFormat f = !a.format.empty() ? parse_data_format(a.format)
                       : p.extension() == ".csv" ? DataFormat::csv
                                                 : DataFormat::binary;
  if (f == DataFormat::csv) write_csv(series, p);
  else write_binary(series, p);
  out << summary_line(series) << "\n";
  return kSuccess;
}

void add_dataset_options(CLI::App* app, DatasetArgs& d) {
  app->add_option("--dataset", d.dataset, "Dataset file (.csv or binary)")->required();
  app->add_option("--format", d.format, "csv or bin (default: from extension)");
  app->add_option("--metadata", d.metadata, "CSV metadata sidecar (default: <name>.meta.json)");
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Traffic flow forecasting with a sensor-token transformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Validate a raw series and write the binary dataset format");
  c_ingest->add_option("--input", ingest.input, "Input file")->required();
  c_ingest->add_option("--format", ingest.format, "csv or bin (default: from extension)");
  c_ingest->add_option("--metadata", ingest.metadata, "CSV metadata sidecar");
  c_ingest->add_option("--output", ingest.output, "Binary dataset to write")->required();

  TrainArgs trn;
  auto* c_train = app.add_subcommand("train", "Train from a run config; writes checkpoint, history and metrics");
  c_train->add_option("--config", trn.config, "Run config JSON")->required();
  c_train->add_flag("--full", trn.full, "Full benchmark protocol with comparison against published scores");

  EvaluateArgs eval;
  auto* c_eval = app.add_subcommand("evaluate", "Metrics of a checkpoint on one split, raw scale");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  add_dataset_options(c_eval, eval.data);
  c_eval->add_option("--split", eval.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  PredictArgs pred;
  auto* c_pred = app.add_subcommand("predict", "Prediction curve for one sensor over the test split");
  c_pred->add_option("--checkpoint", pred.checkpoint, "Checkpoint file")->required();
  add_dataset_options(c_pred, pred.data);
  c_pred->add_option("--sensor", pred.sensor, "Sensor index")->required();
  c_pred->add_option("--window", pred.window, "Length in steps, or with h/d suffix")->capture_default_str();
  c_pred->add_option("--offset", pred.offset, "First test window")->capture_default_str();
  c_pred->add_option("--step", pred.step, "Horizon step plotted (1 = next step)")->capture_default_str();
  c_pred->add_option("--output", pred.output, "CSV file (default: stdout)");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  c_gc->add_option("--config", gc.config, "Run config JSON (model section is used)");
  c_gc->add_option("--sensors", gc.sensors, "Number of sensors")->capture_default_str();
  c_gc->add_option("--corrupt-group", gc.corrupt_group, "Perturb one analytic gradient (negative control)");

  SweepArgs sweep;
  auto* c_sweep = app.add_subcommand("sweep", "Grid search over d_model, L, h and lr");
  c_sweep->add_option("--config", sweep.config, "Run config JSON")->required();
  c_sweep->add_option("--grid", sweep.grid, "JSON file or 'd_model=64,128;L=2;h=4,8;lr=1e-3'")->required();

  std::string ablation_config;
  auto* c_abl = app.add_subcommand("ablation", "Train the six embedding variants");
  c_abl->add_option("--config", ablation_config, "Run config JSON")->required();

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Generate a synthetic dataset");
  c_syn->add_option("--kind", syn.kind, "two_phase or time_varying")
      ->check(CLI::IsMember({"two_phase", "time_varying"}))
      ->capture_default_str();
  c_syn->add_option("--sensors", syn.sensors, "Number of sensors")->capture_default_str();
  c_syn->add_option("--days", syn.days, "Length in days")->capture_default_str();
  c_syn->add_option("--steps", syn.steps, "Length in steps (overrides --days)");
  c_syn->add_option("--noise", syn.noise, "Noise standard deviation");
  c_syn->add_option("--seed", syn.seed, "Seed")->capture_default_str();
  c_syn->add_option("--name", syn.name, "Dataset name stored in the metadata");
  c_syn->add_option("--output", syn.output, "Output file (.csv or binary)")->required();
  c_syn->add_option("--format", syn.format, "csv or bin (default: from extension)");

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  if (!args.empty()) args.pop_back();
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kInputError;
  }

  try {
    if (c_ingest->parsed()) return cmd_ingest(ingest, out);
    if (c_train->parsed()) return cmd_train(trn, out, err);
    if (c_eval->parsed()) return cmd_evaluate(eval, out);
    if (c_pred->parsed()) return cmd_predict(pred, out);
    if (c_gc->parsed()) return cmd_gradcheck(gc, out);
    if (c_sweep->parsed()) return cmd_sweep(sweep, out, err);
    if (c_abl->parsed()) return cmd_ablation(ablation_config, out, err);
    if (c_syn->parsed()) return cmd_synth(syn, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailure;
  }
  return kInputError;
}

}  // namespace fptn::cli
