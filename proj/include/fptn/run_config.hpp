#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "fptn/data.hpp"
#include "fptn/model.hpp"
#include "fptn/synthetic.hpp"
#include "fptn/training.hpp"

namespace fptn {

struct SyntheticSource {
  std::string kind = "two_phase";
  std::size_t sensors = 4;
  std::size_t steps = 2016;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

struct RunConfig {
  struct Dataset {
    std::optional<std::filesystem::path> path;
    DataFormat format = DataFormat::binary;
    std::optional<std::filesystem::path> metadata;
    SplitRatio split_ratio;
    std::optional<SyntheticSource> synthetic;
  } dataset;

  struct Model {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t input_steps = 12;
    std::size_t horizon = 12;
    bool time_embedding = true;
    PositionalMode positional_mode = PositionalMode::learnable;
    double dropout = 0.0;
    std::uint64_t seed = 0;
  } model;

  struct Train {
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 400;
    std::size_t patience = 40;
    std::uint64_t seed = 0;
    double clip_norm = 0.0;
  } train;

  std::filesystem::path output_dir;

  ModelConfig model_config(std::size_t num_sensors) const;
  TrainConfig train_config() const;
  nlohmann::json to_json() const;
};

/// The published run-config schema (schemas/run_config.schema.json).
std::string_view run_config_schema();

/// Checks a document against the subset of JSON Schema the run-config schema
/// uses. Returns the first violation as "<json pointer>: <message>".
std::optional<std::string> schema_violation(const nlohmann::json& schema, const nlohmann::json& doc);

/// Parses and validates a config. Schema violations and semantic errors
/// (d_model not divisible by h, no data source) throw ConfigError.
/// Relative dataset and output paths resolve against base_dir.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Loads or generates the configured series.
std::shared_ptr<RawSeries> load_series(const RunConfig::Dataset& dataset);

SyntheticSpec synthetic_spec(const SyntheticSource& source);

}  // namespace fptn
