#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "funet/model.hpp"
#include "json.hpp"

namespace funet {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Binary layout, all integers little-endian:
///   "FUNT" | u16 version | u32 n + fingerprint JSON | u32 n + run-config JSON | u32 tensor count |
///   per tensor: u32 n + UTF-8 name | u32 rank | rank x u32 extent | numel x f32
struct Checkpoint {
    static constexpr std::uint16_t kVersion = 1;

    nlohmann::json fingerprint;  // {"model": FUnetConfig, "variant": "B"|"BI"|"BIC"}
    nlohmann::json run_config;   // resolved configuration of the run that produced it
    std::vector<std::pair<std::string, Tensor>> tensors;
};

nlohmann::json model_fingerprint(const FUnetConfig& cfg, Variant variant);

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on malformed input.
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const FUnet<float>& model, nlohmann::json run_config = nlohmann::json::object());
/// Copies tensors into `model`; throws CheckpointError when the fingerprint, names or shapes disagree.
void load_parameters(FUnet<float>& model, const Checkpoint& ckpt);
/// Builds the model the fingerprint describes and loads its parameters.
FUnet<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace funet
