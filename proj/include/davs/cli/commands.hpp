// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "davs/cli/config.hpp"

namespace davs::cli {

// Stable exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;   // unexpected failure
inline constexpr int kExitConfig = 2;     // bad configuration or inputs
inline constexpr int kExitIo = 3;         // missing, unwritable or corrupt files
inline constexpr int kExitDiverged = 4;   // training diverged (crash state saved)
inline constexpr int kExitShortSource = 5;  // source shorter than one clip

// What every invocation shares: the command, its config and the output
// directory. The fully resolved config is echoed to out_dir/config.json
// before any other side effect.
struct RunSpec {
  std::string command;
  std::filesystem::path config_path;  // empty -> built-in defaults
  std::vector<std::string> overrides;
  std::filesystem::path out_dir;
};

struct TrainOptions {
  std::filesystem::path data_manifest;  // training split manifest.json
  std::string phase = "all";            // embed | gen | all
  bool resume = false;
};

struct EvalOptions {
  std::filesystem::path checkpoint;      // checkpoint directory
  std::filesystem::path data_manifest;   // evaluation split
  std::filesystem::path train_manifest;  // probe fitting split (probe only)
  std::vector<std::string> metrics;      // empty -> all
};

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path identity_image;  // .png or .f32raw frame(s)
  std::filesystem::path speech_source;   // .wav, .f32raw or PNG directory
  std::string source_kind = "audio";     // audio | video
  bool write_video = false;              // additionally emit clip.avi
};

// Each command returns one of the exit codes above and reports failures on
// stderr; they never throw.
int cmd_toygen(const RunSpec& spec);
int cmd_train(const RunSpec& spec, const TrainOptions& opts);
int cmd_eval(const RunSpec& spec, const EvalOptions& opts);
int cmd_infer(const RunSpec& spec, const InferOptions& opts);

}  // namespace davs::cli
