// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "davs/avdata/toyworld.hpp"
#include "davs/core/tensor.hpp"

namespace davs::avdata {

struct ManifestRecord {
  std::string sample_id;
  long word_id = 0;
  long person_id = 0;
  std::string frames_path;   // relative to the manifest directory
  std::string frames_format; // "f32raw" or "png"
  std::string audio_path;    // relative to the manifest directory
  std::vector<double> openness_truth;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::filesystem::path dir;  // directory holding manifest.json and data
  std::string split;
  ToyWorldConfig toy;
  std::vector<ManifestRecord> records;
};

// Fully materialized sample.
struct SampleRecord {
  ManifestRecord meta;
  core::Tensor<float> frames;  // (T, H, W, 3) in [0, 1]
  std::vector<float> audio;    // in [-1, 1]
};

// Generates train/val/test splits under out_dir/<split>/ with one
// manifest.json per split. Reruns with the same config produce byte-identical
// trees. Returns the manifest paths in train, val, test order.
std::vector<std::filesystem::path> generate_toy_dataset(
    const ToyWorldConfig& cfg, const std::filesystem::path& out_dir);

void save_manifest(const Manifest& m, const std::filesystem::path& json_path);
Manifest load_manifest(const std::filesystem::path& json_path);

SampleRecord load_record(const Manifest& m, long index);

// Frame blob helpers (raw little-endian float32 plus a JSON shape sidecar).
void write_frames_f32raw(const std::filesystem::path& path,
                         const core::Tensor<float>& frames);
core::Tensor<float> read_frames_f32raw(const std::filesystem::path& path);

// One training/eval batch: indices into the manifest plus the visual/audio
// pairing matrix (entry (i, j) = 1 iff visual stream i and audio stream j
// come from the same sample; identity for standard batches).
struct Batch {
  std::vector<long> indices;
  core::Tensor<float> pairing;
};

enum class BatchMode { kTrain, kEval };

// Deterministic batching. Train mode shuffles with `seed` and drops the
// partial tail batch; eval mode keeps order and the tail.
std::vector<Batch> iterate_batches(const Manifest& m, long batch_size,
                                   std::uint64_t seed, BatchMode mode);

// JSON (de)serialization of the toy config, shared with the CLI config file.
std::string toy_config_to_json(const ToyWorldConfig& cfg);
ToyWorldConfig toy_config_from_json_text(const std::string& text);

}  // namespace davs::avdata
