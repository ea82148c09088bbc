#pragma once

#include <array>
#include <cstddef>
#include <string_view>

// Published figures for the full-size PeMS benchmarks. They are kept for
// comparison output only and are never used as test thresholds.
namespace fptn::reference {

struct DatasetSummary {
  std::string_view name;
  std::size_t sensors;
  std::size_t steps;
};

inline constexpr std::array<DatasetSummary, 4> kDatasets{{
    {"PeMSD3", 358, 26208},
    {"PeMSD4", 307, 16992},
    {"PeMSD7", 883, 28224},
    {"PeMSD8", 170, 17856},
}};
inline constexpr int kStepMinutes = 5;

struct ForecastScore {
  std::string_view dataset;
  double mae;
  double rmse;
  double mape;  // percent
};

inline constexpr std::array<ForecastScore, 4> kFptnScores{{
    {"PeMSD3", 14.62, 24.81, 14.61},
    {"PeMSD4", 18.49, 30.29, 13.10},
    {"PeMSD7", 19.94, 32.49, 8.77},
    {"PeMSD8", 13.98, 23.30, 10.06},
}};

struct AblationScore {
  bool time_embedding;
  std::string_view positional;
  double mae;
  double rmse;
  double mape;
};

// PeMSD4 embedding ablation.
inline constexpr std::array<AblationScore, 6> kAblation{{
    {false, "none", 22.59, 35.48, 16.92},
    {true, "none", 21.65, 34.80, 15.21},
    {false, "fixed", 22.14, 34.54, 18.48},
    {false, "learnable", 19.38, 30.97, 15.95},
    {true, "fixed", 18.55, 30.32, 14.16},
    {true, "learnable", 18.49, 30.29, 13.10},
}};

// Best setting of the PeMSD3 parameter sweep.
inline constexpr std::size_t kOptimumDModel = 256;
inline constexpr std::size_t kOptimumLayers = 4;
inline constexpr std::size_t kOptimumHeads = 8;

inline constexpr std::size_t kEpochs = 400;
inline constexpr std::size_t kBatchSize = 64;
inline constexpr std::size_t kPatience = 40;
inline constexpr std::size_t kInputSteps = 12;
inline constexpr std::size_t kHorizon = 12;
inline constexpr std::array<std::size_t, 5> kDModelGrid{64, 128, 256, 512, 1024};
inline constexpr std::array<std::size_t, 4> kHeadGrid{4, 8, 16, 32};
inline constexpr std::array<std::size_t, 5> kLayerGrid{2, 3, 4, 5, 6};
inline constexpr std::array<double, 4> kLrGrid{5e-3, 1e-3, 5e-4, 1e-4};

inline const DatasetSummary* find_dataset(std::string_view name) {
  for (const auto& d : kDatasets)
    if (d.name == name) return &d;
  return nullptr;
}

inline const ForecastScore* find_score(std::string_view name) {
  for (const auto& s : kFptnScores)
    if (s.dataset == name) return &s;
  return nullptr;
}

}  // namespace fptn::reference
