// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "davs/avdata/dataset.hpp"
#include "davs/nets/networks.hpp"
#include "davs/train/trainer.hpp"
#include "json.hpp"

namespace davs::cli {

// Settings of the evaluation protocols that are not implied by the
// checkpoint or the data.
struct EvalConfig {
  double probe_l2 = 1e-3;       // ridge strength of the linear probe
  long probe_iterations = 300;  // probe optimizer budget
  std::string fidelity_source = "audio";  // speech source scored in reports

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

// Everything one run needs, grouped into the five config-file sections.
struct AppConfig {
  avdata::ToyWorldConfig toy;
  nets::NetworkConfig network;
  train::TrainConfig train;  // carries the loss weights internally
  EvalConfig eval;

  void validate() const;
};

// Canonical JSON with exactly the sections
// {toy, network, train, weights, eval}; the loss weights are split out of
// the train section. app_config_from_json rejects unknown sections or keys
// and fills omitted ones with defaults.
nlohmann::json app_config_to_json(const AppConfig& cfg);
AppConfig app_config_from_json(const nlohmann::json& j);

// One `section.key=value` assignment (value parsed as JSON when possible,
// as a bare string otherwise), applied into a config JSON document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Reads the config file (empty path -> all defaults), layers it over the
// defaults, applies the overrides in order, and validates the result.
AppConfig load_app_config(const std::filesystem::path& config_path,
                          const std::vector<std::string>& overrides);

// Reads DAVS_NUM_WORKERS (upper bound on data-loading parallelism).
// Unset -> 1. Set to anything but a positive integer -> ConfigError.
long data_worker_cap();

}  // namespace davs::cli
