#include "fptn/run_config.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include "fptn/errors.hpp"
#include "run_config_schema.inc"

namespace fptn {

using nlohmann::json;

namespace {

std::string join_pointer(const std::string& base, const std::string& key) { return base + "/" + key; }

bool type_matches(const std::string& type, const json& v) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

std::optional<std::string> check(const json& schema, const json& v, const std::string& at) {
  const std::string where = at.empty() ? "/" : at;
  if (auto it = schema.find("type"); it != schema.end() && !type_matches(it->get<std::string>(), v))
    return where + ": expected " + it->get<std::string>() + ", found " + v.type_name();
  if (auto it = schema.find("enum"); it != schema.end()) {
    bool found = false;
    for (const auto& e : *it) found = found || e == v;
    if (!found) return where + ": " + v.dump() + " is not one of " + it->dump();
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (auto it = schema.find("minimum"); it != schema.end() && x < it->get<double>())
      return where + ": " + v.dump() + " is below the minimum " + it->dump();
    if (auto it = schema.find("maximum"); it != schema.end() && x > it->get<double>())
      return where + ": " + v.dump() + " is above the maximum " + it->dump();
    if (auto it = schema.find("exclusiveMinimum"); it != schema.end() && x <= it->get<double>())
      return where + ": " + v.dump() + " must be greater than " + it->dump();
    if (auto it = schema.find("exclusiveMaximum"); it != schema.end() && x >= it->get<double>())
      return where + ": " + v.dump() + " must be less than " + it->dump();
  }
  if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    if (auto it = schema.find("minLength"); it != schema.end() && s.size() < it->get<std::size_t>())
      return where + ": string is shorter than " + it->dump();
    if (auto it = schema.find("pattern"); it != schema.end() && !std::regex_search(s, std::regex(it->get<std::string>())))
      return where + ": '" + s + "' does not match " + it->get<std::string>();
  }
  if (v.is_object()) {
    if (auto it = schema.find("required"); it != schema.end())
      for (const auto& key : *it)
        if (!v.contains(key.get<std::string>())) return where + ": missing required key '" + key.get<std::string>() + "'";
    const json props = schema.value("properties", json::object());
    const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
    for (const auto& [key, value] : v.items()) {
      if (auto p = props.find(key); p != props.end()) {
        if (auto err = check(*p, value, join_pointer(at, key))) return err;
      } else if (closed) {
        return join_pointer(at, key) + ": unknown key";
      }
    }
  }
  if (v.is_array()) {
    if (auto it = schema.find("items"); it != schema.end())
      for (std::size_t i = 0; i < v.size(); ++i)
        if (auto err = check(*it, v[i], join_pointer(at, std::to_string(i)))) return err;
  }
  return std::nullopt;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

std::string_view run_config_schema() { return kRunConfigSchema; }

std::optional<std::string> schema_violation(const json& schema, const json& doc) { return check(schema, doc, ""); }

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  static const json schema = json::parse(run_config_schema());
  if (auto err = schema_violation(schema, doc)) throw ConfigError("config schema violation at " + *err);

  RunConfig c;
  const json& d = doc["dataset"];
  if (d.contains("path") == d.contains("synthetic"))
    throw ConfigError("config schema violation at /dataset: exactly one of 'path' or 'synthetic' is required");
  if (d.contains("path")) {
    c.dataset.path = resolve(base_dir, d["path"].get<std::string>());
    c.dataset.format = d.contains("format") ? parse_data_format(d["format"].get<std::string>())
                       : c.dataset.path->extension() == ".csv" ? DataFormat::csv
                                                              : DataFormat::binary;
  }
  if (d.contains("metadata")) c.dataset.metadata = resolve(base_dir, d["metadata"].get<std::string>());
  if (d.contains("split_ratio")) c.dataset.split_ratio = SplitRatio::parse(d["split_ratio"].get<std::string>());
  if (d.contains("synthetic")) {
    const json& s = d["synthetic"];
    SyntheticSource src;
    src.kind = s["kind"];
    src.sensors = s["sensors"];
    src.steps = s["steps"];
    src.noise_std = s.value("noise_std", src.kind == "time_varying" ? 2.0 : 0.0);
    src.seed = s.value("seed", std::uint64_t{0});
    c.dataset.synthetic = src;
  }

  const json& m = doc["model"];
  c.model.d_model = m["d_model"];
  c.model.heads = m["h"];
  c.model.layers = m["L"];
  c.model.input_steps = m.value("T", c.model.input_steps);
  c.model.horizon = m.value("K", c.model.horizon);
  c.model.time_embedding = m.value("time_embedding", c.model.time_embedding);
  if (m.contains("positional_mode")) c.model.positional_mode = parse_positional_mode(m["positional_mode"].get<std::string>());
  c.model.dropout = m.value("dropout", c.model.dropout);
  c.model.seed = m.value("seed", c.model.seed);
  if (c.model.d_model % c.model.heads != 0) {
    throw ConfigError("config schema violation at /model: d_model " + std::to_string(c.model.d_model) +
                      " is not divisible by h " + std::to_string(c.model.heads));
  }

  const json& t = doc["train"];
  c.train.lr = t.value("lr", c.train.lr);
  c.train.batch_size = t.value("batch_size", c.train.batch_size);
  c.train.epochs = t.value("epochs", c.train.epochs);
  c.train.patience = t.value("patience", c.train.patience);
  c.train.seed = t.value("seed", c.train.seed);
  c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);

  c.output_dir = resolve(base_dir, doc["output"]["dir"].get<std::string>());
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

ModelConfig RunConfig::model_config(std::size_t num_sensors) const {
  ModelConfig m;
  m.num_sensors = num_sensors;
  m.input_steps = model.input_steps;
  m.horizon = model.horizon;
  m.d_model = model.d_model;
  m.heads = model.heads;
  m.layers = model.layers;
  m.use_time_embedding = model.time_embedding;
  m.positional_mode = model.positional_mode;
  m.dropout = model.dropout;
  m.seed = model.seed;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.lr = train.lr;
  t.batch_size = train.batch_size;
  t.epochs = train.epochs;
  t.patience = train.patience;
  t.seed = train.seed;
  t.clip_norm = train.clip_norm;
  return t;
}

json RunConfig::to_json() const {
  json d;
  if (dataset.path) {
    d["path"] = dataset.path->string();
    d["format"] = dataset.format == DataFormat::csv ? "csv" : "bin";
  }
  if (dataset.metadata) d["metadata"] = dataset.metadata->string();
  d["split_ratio"] = dataset.split_ratio.str();
  if (dataset.synthetic) {
    const auto& s = *dataset.synthetic;
    d["synthetic"] = {{"kind", s.kind}, {"sensors", s.sensors}, {"steps", s.steps}, {"noise_std", s.noise_std},
                      {"seed", s.seed}};
  }
  return {{"dataset", d},
          {"model",
           {{"d_model", model.d_model},
            {"h", model.heads},
            {"L", model.layers},
            {"T", model.input_steps},
            {"K", model.horizon},
            {"time_embedding", model.time_embedding},
            {"positional_mode", std::string(to_string(model.positional_mode))},
            {"dropout", model.dropout},
            {"seed", model.seed}}},
          {"train",
           {{"lr", train.lr},
            {"batch_size", train.batch_size},
            {"epochs", train.epochs},
            {"patience", train.patience},
            {"seed", train.seed},
            {"clip_norm", train.clip_norm}}},
          {"output", {{"dir", output_dir.string()}}}};
}

SyntheticSpec synthetic_spec(const SyntheticSource& s) {
  if (s.kind == "two_phase") return two_phase_spec(s.sensors, s.steps, s.noise_std, s.seed);
  if (s.kind == "time_varying") return time_varying_spec(s.sensors, s.steps, s.noise_std, s.seed);
  throw ConfigError("unknown synthetic kind '" + s.kind + "'");
}

std::shared_ptr<RawSeries> load_series(const RunConfig::Dataset& d) {
  if (d.synthetic) return std::make_shared<RawSeries>(generate(synthetic_spec(*d.synthetic)));
  if (!d.path) throw ConfigError("dataset has neither a path nor a synthetic source");
  return std::make_shared<RawSeries>(load_raw(*d.path, d.format, d.metadata));
}

}  // namespace fptn
