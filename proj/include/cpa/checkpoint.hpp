// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers and floats little-endian):
//   "CPAE" | u32 version (1) | u32 metadata length | metadata (UTF-8 JSON)
//   | every parameter in canonical declaration order as row-major f64.
// The metadata carries the ModelConfig under "config"; anything else the
// caller supplies (seed, training stats) is stored verbatim.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "cpa/model.hpp"

namespace cpa {

inline constexpr char kCheckpointMagic[4] = {'C', 'P', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Transformer model;
  nlohmann::json metadata;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

std::string serialize_checkpoint(const Transformer& model, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Transformer& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the parameter bytes, as 16 hex digits.
std::string model_checksum(const Transformer& model);

}  // namespace cpa
