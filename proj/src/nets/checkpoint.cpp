// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/nets/checkpoint.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>

#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"

namespace davs::nets {

using nlohmann::json;

json network_config_to_json(const NetworkConfig& cfg) {
  return json{{"latent_dim", cfg.latent_dim},
              {"frame_size", cfg.frame_size},
              {"frames_per_clip", cfg.frames_per_clip},
              {"n_words", cfg.n_words},
              {"n_persons", cfg.n_persons},
              {"channels", cfg.channels},
              {"gan_feature_dim", cfg.gan_feature_dim},
              {"temporal_agg", cfg.temporal_agg}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig cfg;
  try {
    static const char* kKeys[] = {"latent_dim",      "frame_size",
                                  "frames_per_clip", "n_words",
                                  "n_persons",       "channels",
                                  "gan_feature_dim", "temporal_agg"};
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      for (const char* k : kKeys) known = known || key == k;
      if (!known)
        throw ConfigError("unknown network config key: \"" + key + "\"");
    }
    cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
    cfg.frame_size = j.value("frame_size", cfg.frame_size);
    cfg.frames_per_clip = j.value("frames_per_clip", cfg.frames_per_clip);
    cfg.n_words = j.value("n_words", cfg.n_words);
    cfg.n_persons = j.value("n_persons", cfg.n_persons);
    cfg.channels = j.value("channels", cfg.channels);
    cfg.gan_feature_dim = j.value("gan_feature_dim", cfg.gan_feature_dim);
    cfg.temporal_agg = j.value("temporal_agg", cfg.temporal_agg);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string config_hash(const NetworkConfig& cfg) {
  const std::string canon = network_config_to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

namespace {

std::filesystem::path array_file(const std::string& group,
                                 const std::string& name) {
  return std::filesystem::path("arrays") / group / (name + ".bin");
}

}  // namespace

void save_checkpoint(const core::ParamStore<float>& params,
                     const NetworkConfig& cfg,
                     const std::filesystem::path& dir) {
  json groups = json::object();
  std::error_code ec;
  params.for_each([&](const std::string& group, const std::string& name,
                      const core::Var<float>& var) {
    const auto rel = array_file(group, name);
    std::filesystem::create_directories(dir / rel.parent_path(), ec);
    const auto& vec = var.value().vec();
    core::write_file_atomic(dir / rel, vec.data(), vec.size() * sizeof(float));
    groups[group].push_back(json{{"name", name},
                                 {"shape", var.shape()},
                                 {"file", rel.generic_string()}});
  });
  const json manifest = {{"format", "davs-checkpoint-v1"},
                         {"dtype", "float32"},
                         {"config", network_config_to_json(cfg)},
                         {"config_hash", config_hash(cfg)},
                         {"groups", groups}};
  core::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointBundle load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(core::read_file_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest is not valid JSON: " +
                      std::string(e.what()));
  }
  CheckpointBundle bundle;
  try {
    if (manifest.at("format").get<std::string>() != "davs-checkpoint-v1")
      throw FormatError("unrecognized checkpoint format: " +
                        manifest.at("format").dump());
    if (manifest.at("dtype").get<std::string>() != "float32")
      throw FormatError("unsupported checkpoint dtype: " +
                        manifest.at("dtype").dump());
    try {
      bundle.config = network_config_from_json(manifest.at("config"));
    } catch (const ConfigError& e) {
      throw FormatError("checkpoint manifest holds an invalid config: " +
                        std::string(e.what()));
    }
    bundle.hash = manifest.at("config_hash").get<std::string>();
    if (bundle.hash != config_hash(bundle.config))
      throw FormatError(
          "checkpoint manifest is corrupt: stored config_hash does not match "
          "its own config");
    for (const auto& [group, entries] : manifest.at("groups").items()) {
      for (const auto& entry : entries) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<core::Shape>();
        const auto rel = entry.at("file").get<std::string>();
        const auto bytes = core::read_file_bytes(dir / rel);
        core::Tensor<float> t(shape);
        if (bytes.size() != t.vec().size() * sizeof(float))
          throw FormatError("checkpoint array " + group + "/" + name +
                            " is truncated or corrupt: expected " +
                            std::to_string(t.vec().size() * sizeof(float)) +
                            " bytes, file has " + std::to_string(bytes.size()));
        std::memcpy(t.vec().data(), bytes.data(), bytes.size());
        for (float v : t.vec())
          if (!std::isfinite(v))
            throw FormatError("checkpoint array " + group + "/" + name +
                              " contains non-finite values");
        bundle.params.add(group, name, std::move(t));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest is truncated or corrupt: " +
                      std::string(e.what()));
  }
  return bundle;
}

CheckpointBundle load_checkpoint(const std::filesystem::path& dir,
                                 const NetworkConfig& expect) {
  auto bundle = load_checkpoint(dir);
  if (bundle.hash != config_hash(expect))
    throw CheckpointMismatchError(
        "checkpoint at " + dir.string() + " was built with config hash " +
        bundle.hash + " but the current config hashes to " +
        config_hash(expect) +
        " (latent_dim/frame_size/heads must match exactly)");
  return bundle;
}

void assign_params(const CheckpointBundle& bundle,
                   core::ParamStore<float>& dst) {
  long expected = 0;
  bundle.params.for_each([&](const std::string&, const std::string&,
                             const core::Var<float>&) { ++expected; });
  long assigned = 0;
  dst.for_each([&](const std::string& group, const std::string& name,
                   core::Var<float>& var) {
    const auto* src =
        const_cast<core::ParamStore<float>&>(bundle.params).find(group, name);
    if (src == nullptr)
      throw CheckpointMismatchError("checkpoint is missing array " + group +
                                    "/" + name);
    if (src->shape() != var.shape())
      throw CheckpointMismatchError(
          "checkpoint array " + group + "/" + name + " has shape " +
          detail::shape_str(src->shape()) + " but the model expects " +
          detail::shape_str(var.shape()));
    var.mutable_value() = src->value();
    ++assigned;
  });
  if (assigned != expected)
    throw CheckpointMismatchError(
        "checkpoint holds " + std::to_string(expected) +
        " arrays but the model defines " + std::to_string(assigned));
}

}  // namespace davs::nets
