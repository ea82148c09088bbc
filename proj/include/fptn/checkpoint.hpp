#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "fptn/data.hpp"
#include "fptn/model.hpp"

namespace fptn {

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view text);

struct Checkpoint {
  FptnModel model;
  NormStats stats;
  SplitRatio ratio;
  std::string dataset;  // name from the series metadata, informational
};

/// Layout (all integers little-endian):
///   "FPTNCKPT" | u16 version | u64 len + JSON header |
///   u64 array count | per array: u64 len + name, u32 rank, u64 dims..., f64 values...
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fptn
