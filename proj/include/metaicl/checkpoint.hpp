#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "metaicl/model.hpp"

namespace metaicl {

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct CheckpointInfo {
  std::uint64_t step = 0;
  std::string rng_state;
  // Free-form provenance: regime, direction, k, init source, run config, corpus hash.
  nlohmann::json provenance = nlohmann::json::object();
};

struct Checkpoint {
  ModelParams<float> params;
  CheckpointInfo info;
};

// Layout: "MICLCKPT" | u32 version | u64 header bytes | JSON header |
// float32 little-endian tensors in ModelParams::for_each_tensor order.
std::string serialize_checkpoint(const ModelParams<float>& params, const CheckpointInfo& info);
Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, const CheckpointInfo& info);
// Throws ConfigError when `expected` is given and differs from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace metaicl
