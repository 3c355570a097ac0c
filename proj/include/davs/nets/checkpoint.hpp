// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "davs/core/nn.hpp"
#include "davs/nets/networks.hpp"
#include "json.hpp"

namespace davs::nets {

// Canonical JSON form of a NetworkConfig; key order is fixed by the JSON
// library, so equal configs serialize identically.
nlohmann::json network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

// FNV-1a hash of the canonical JSON, as 16 hex digits. Stored inside every
// checkpoint and report so artifacts from different configs never mix.
std::string config_hash(const NetworkConfig& cfg);

// A loaded checkpoint: the config it was trained with plus all arrays.
struct CheckpointBundle {
  NetworkConfig config;
  std::string hash;
  core::ParamStore<float> params;
};

// Writes dir/manifest.json plus one raw little-endian float32 blob per
// parameter under dir/arrays/<group>/<name>.bin. The manifest is written
// last so a crash mid-save never leaves a readable but wrong checkpoint.
void save_checkpoint(const core::ParamStore<float>& params,
                     const NetworkConfig& cfg,
                     const std::filesystem::path& dir);

// Reads a checkpoint directory. Corrupt or truncated files raise
// FormatError; a manifest whose stored hash disagrees with its own config
// raises FormatError as well.
CheckpointBundle load_checkpoint(const std::filesystem::path& dir);

// As above, but additionally requires the checkpoint to match `expect`;
// raises CheckpointMismatchError when the configs differ.
CheckpointBundle load_checkpoint(const std::filesystem::path& dir,
                                 const NetworkConfig& expect);

// Copies every array of `bundle` into `dst`, which must have exactly the
// same groups, names and shapes (as built by DavsModel from the same
// config); any structural difference raises CheckpointMismatchError.
void assign_params(const CheckpointBundle& bundle,
                   core::ParamStore<float>& dst);

}  // namespace davs::nets
