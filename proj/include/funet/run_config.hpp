#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "funet/model.hpp"
#include "funet/training.hpp"
#include "json.hpp"

namespace funet {

struct DataConfig {
    std::array<double, 3> ratios{0.65, 0.175, 0.175};
    std::uint64_t split_seed = 0;  // used when the dataset has no manifest.json
    bool foreground_only = false;
};

/// Everything one run needs, as read from a JSON config file:
///   {"model": {...}, "train": {...}, "data": {...}, "variant": "BIC", "deterministic": true, "threads": 0}
/// Every section and key is optional; unknown keys are errors.
struct RunConfig {
    FUnetConfig model;
    TrainConfig train;
    DataConfig data;
    Variant variant = Variant::Full;
    bool deterministic = true;
    int threads = 0;  // 0: OpenMP default

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig read_run_config(const std::filesystem::path& path);

}  // namespace funet
