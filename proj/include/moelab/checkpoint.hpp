// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   "ADVMOE01" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
//   | every tensor as little-endian float32, in the order listed in metadata
//
// Tensor order is router parameters, backbone parameters, then the
// normalization running statistics.

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "moelab/model.hpp"

namespace moelab {

inline constexpr char kCheckpointMagic[9] = "ADVMOE01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json to_json(const BackboneConfig& b);
nlohmann::json to_json(const MoEConfig& m);
nlohmann::json to_json(const ChannelMask& m);
nlohmann::json to_json(const ModelConfig& c);
BackboneConfig backbone_from_json(const nlohmann::json& j);
MoEConfig moe_from_json(const nlohmann::json& j);
ChannelMask mask_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model<float> model;
  nlohmann::json extra;  // caller-supplied document (experiment config, run info)
};

/// Writes atomically (temp file + rename). `extra` is stored under "extra".
void save_checkpoint(const std::string& path, const Model<float>& model, const nlohmann::json& extra);
/// Throws FormatError on bad magic, version, truncation or tensor shape mismatch.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace moelab
