// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/cli/config.hpp"

#include <cmath>
#include <cstdlib>
#include <set>

#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"
#include "davs/nets/checkpoint.hpp"

namespace davs::cli {

using nlohmann::json;

void EvalConfig::validate() const {
  if (!(probe_l2 >= 0.0) || !std::isfinite(probe_l2))
    throw ConfigError("eval.probe_l2 must be finite and >= 0");
  if (probe_iterations < 1)
    throw ConfigError("eval.probe_iterations must be >= 1");
  if (fidelity_source != "audio" && fidelity_source != "video")
    throw ConfigError("eval.fidelity_source must be 'audio' or 'video', got '" +
                      fidelity_source + "'");
}

void AppConfig::validate() const {
  toy.validate();
  network.validate();
  train.validate();
  eval.validate();
  // Cross-section consistency: the network must fit the dataset recipe.
  if (network.n_words != toy.n_words)
    throw ConfigError("network.n_words (" + std::to_string(network.n_words) +
                      ") must equal toy.n_words (" +
                      std::to_string(toy.n_words) + ")");
  if (network.n_persons != toy.n_persons)
    throw ConfigError("network.n_persons must equal toy.n_persons");
  if (network.frame_size != toy.frame_size)
    throw ConfigError("network.frame_size must equal toy.frame_size");
  if (network.frames_per_clip != toy.frames_per_clip)
    throw ConfigError("network.frames_per_clip must equal toy.frames_per_clip");
}

namespace {

json eval_config_to_json(const EvalConfig& cfg) {
  return json{{"probe_l2", cfg.probe_l2},
              {"probe_iterations", cfg.probe_iterations},
              {"fidelity_source", cfg.fidelity_source}};
}

EvalConfig eval_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("eval config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "probe_l2" && it.key() != "probe_iterations" &&
        it.key() != "fidelity_source")
      throw ConfigError("unknown eval config key: " + it.key());
  EvalConfig cfg;
  try {
    if (j.contains("probe_l2")) cfg.probe_l2 = j.at("probe_l2").get<double>();
    if (j.contains("probe_iterations"))
      cfg.probe_iterations = j.at("probe_iterations").get<long>();
    if (j.contains("fidelity_source"))
      cfg.fidelity_source = j.at("fidelity_source").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
  return cfg;
}

}  // namespace

json app_config_to_json(const AppConfig& cfg) {
  json j;
  j["toy"] = json::parse(avdata::toy_config_to_json(cfg.toy));
  j["network"] = nets::network_config_to_json(cfg.network);
  json tj = train::train_config_to_json(cfg.train);
  j["weights"] = tj.at("weights");
  tj.erase("weights");
  j["train"] = tj;
  j["eval"] = eval_config_to_json(cfg.eval);
  return j;
}

AppConfig app_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections = {"toy", "network", "train",
                                                 "weights", "eval"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!sections.count(it.key()))
      throw ConfigError("unknown config section: " + it.key());

  AppConfig cfg;
  try {
    if (j.contains("toy"))
      cfg.toy = avdata::toy_config_from_json_text(j.at("toy").dump());
    if (j.contains("network"))
      cfg.network = nets::network_config_from_json(j.at("network"));
    json tj = j.contains("train") ? j.at("train")
                                  : train::train_config_to_json(cfg.train);
    if (tj.contains("weights"))
      throw ConfigError(
          "loss weights belong in the top-level 'weights' section, not in "
          "'train'");
    tj["weights"] = j.contains("weights")
                        ? j.at("weights")
                        : train::train_config_to_json(cfg.train).at("weights");
    cfg.train = train::train_config_from_json(tj);
    if (j.contains("eval")) cfg.eval = eval_config_from_json(j.at("eval"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like section.key=value, got '" +
                      assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    if (dot == std::string::npos) {
      parts.push_back(key.substr(start));
      break;
    }
    parts.push_back(key.substr(start, dot - start));
    start = dot + 1;
  }
  if (parts.size() < 2)
    throw ConfigError("override key '" + key +
                      "' must name a section and a key (section.key=value)");
  for (const auto& p : parts)
    if (p.empty())
      throw ConfigError("override key '" + key + "' has an empty component");

  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;  // bare words are strings: eval.fidelity_source=video
  }

  json* node = &doc;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (!next.is_object() && !next.is_null())
      throw ConfigError("override key '" + key + "': '" + parts[i] +
                        "' is not a config section");
    node = &next;
  }
  (*node)[parts.back()] = value;
}

AppConfig load_app_config(const std::filesystem::path& config_path,
                          const std::vector<std::string>& overrides) {
  json doc = app_config_to_json(AppConfig{});  // defaults
  if (!config_path.empty()) {
    json file;
    try {
      file = json::parse(core::read_file_text(config_path));
    } catch (const json::exception& e) {
      throw ConfigError("config file " + config_path.string() + ": " +
                        e.what());
    }
    if (!file.is_object())
      throw ConfigError("config file " + config_path.string() +
                        " must hold a JSON object");
    doc.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return app_config_from_json(doc);
}

long data_worker_cap() {
  const char* raw = std::getenv("DAVS_NUM_WORKERS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || v < 1)
    throw ConfigError(std::string("DAVS_NUM_WORKERS must be a positive "
                                  "integer, got '") +
                      raw + "'");
  return v;
}

}  // namespace davs::cli
