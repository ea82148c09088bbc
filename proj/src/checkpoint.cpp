#include "fptn/checkpoint.hpp"

#include <fstream>

#include "fptn/binary_io.hpp"
#include "fptn/errors.hpp"
#include "json.hpp"

namespace fptn {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'P', 'T', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kVersion = 1;

json config_json(const ModelConfig& c) {
  return {{"num_sensors", c.num_sensors},
          {"input_steps", c.input_steps},
          {"horizon", c.horizon},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"layers", c.layers},
          {"use_time_embedding", c.use_time_embedding},
          {"positional_mode", std::string(to_string(c.positional_mode))},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"allow_empty_stack", c.allow_empty_stack}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  try {
    c.num_sensors = j.at("num_sensors").get<std::size_t>();
    c.input_steps = j.at("input_steps").get<std::size_t>();
    c.horizon = j.at("horizon").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.use_time_embedding = j.at("use_time_embedding").get<bool>();
    c.positional_mode = parse_positional_mode(j.at("positional_mode").get<std::string>());
    c.dropout = j.value("dropout", 0.0);
    c.seed = j.value("seed", std::uint64_t{0});
    c.allow_empty_stack = j.value("allow_empty_stack", false);
  } catch (const json::exception& e) {
    throw CompatibilityError(std::string("checkpoint model config is malformed: ") + e.what());
  }
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::parse_error& e) {
    throw CompatibilityError(std::string("model config is not valid JSON: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  FptnModel model = ck.model;  // for_each_array needs a mutable model
  json header;
  header["model"] = config_json(model.config());
  header["normalization"] = {{"mean", ck.stats.mean}, {"std", ck.stats.std}};
  header["split_ratio"] = {ck.ratio.train, ck.ratio.val, ck.ratio.test};
  header["dataset"] = ck.dataset;
  json initialized = json::array();
  for (const auto& layer : model.params().layers) initialized.push_back({layer.norm1.initialized, layer.norm2.initialized});
  header["norm_initialized"] = initialized;

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IngestionError("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic, sizeof kMagic);
    binary_io::write_le<std::uint16_t>(out, kVersion);
    binary_io::write_bytes(out, header.dump());

    std::uint64_t count = 0;
    model.for_each_array([&](const std::string&, Tensor&) { ++count; });
    binary_io::write_le<std::uint64_t>(out, count);
    model.for_each_array([&](const std::string& name, Tensor& t) {
      binary_io::write_bytes(out, name);
      binary_io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) binary_io::write_le<std::uint64_t>(out, d);
      for (double v : t.data()) binary_io::write_f64(out, v);
    });
    if (!out) throw IngestionError("failed while writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
    throw CompatibilityError("'" + path.string() + "' is not an FPTN checkpoint");
  }
  const auto version = binary_io::read_le<std::uint16_t>(in);
  if (version != kVersion) throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));

  json header;
  try {
    header = json::parse(binary_io::read_bytes(in));
  } catch (const json::parse_error& e) {
    throw CompatibilityError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  ck.model = FptnModel(config_from(header.at("model")));
  ck.stats = {header.at("normalization").at("mean").get<double>(), header.at("normalization").at("std").get<double>()};
  const auto& r = header.at("split_ratio");
  ck.ratio = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
  ck.dataset = header.value("dataset", std::string{});
  const auto& init = header.at("norm_initialized");
  auto& layers = ck.model.params().layers;
  if (init.size() != layers.size()) throw CompatibilityError("checkpoint norm flags do not match the layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].norm1.initialized = init.at(l).at(0).get<bool>();
    layers[l].norm2.initialized = init.at(l).at(1).get<bool>();
  }

  const auto count = binary_io::read_le<std::uint64_t>(in);
  std::uint64_t seen = 0;
  ck.model.for_each_array([&](const std::string& name, Tensor& t) {
    if (seen++ >= count) throw CompatibilityError("checkpoint is missing array '" + name + "'");
    const std::string stored = binary_io::read_bytes(in, 4096);
    if (stored != name) {
      throw CompatibilityError("checkpoint array '" + stored + "' found where '" + name + "' was expected");
    }
    const auto rank = binary_io::read_le<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = binary_io::read_le<std::uint64_t>(in);
    if (shape != t.shape()) {
      throw CompatibilityError("checkpoint array '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                               shape_str(t.shape()));
    }
    for (auto& v : t.data()) v = binary_io::read_f64(in);
  });
  if (seen != count) throw CompatibilityError("checkpoint holds unexpected extra arrays");
  return ck;
}

}  // namespace fptn
