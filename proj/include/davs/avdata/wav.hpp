// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

namespace davs::avdata {

// Writes mono 16-bit PCM. Samples are clamped to [-1, 1] and quantized with
// round-half-away; the file is written atomically.
void write_wav_pcm16(const std::filesystem::path& path,
                     const std::vector<double>& samples, long sample_rate);

struct WavData {
  std::vector<float> samples;  // in [-1, 1]
  long sample_rate = 0;
};

// Reads mono 16-bit PCM. Anything else (stereo, float, compressed) raises
// FormatError.
WavData read_wav_pcm16(const std::filesystem::path& path);

}  // namespace davs::avdata
