// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "davs/core/tensor.hpp"

namespace davs::audiofeat {

struct MfccConfig {
  long sample_rate = 8000;
  double window_seconds = 0.025;
  double hop_seconds = 0.010;
  long n_mels = 40;
  long n_cepstra = 13;  // c0 included here, dropped from the output
  double log_floor = 1e-10;
  double preemphasis = 0.97;
  long context_frames = 20;  // align_block width

  long window_samples() const {
    return static_cast<long>(sample_rate * window_seconds + 0.5);
  }
  long hop_samples() const {
    return static_cast<long>(sample_rate * hop_seconds + 0.5);
  }
  long kept_coeffs() const { return n_cepstra - 1; }

  void validate() const;
};

struct MfccSequence {
  core::Tensor<double> coeffs;  // (frames, kept_coeffs), c0 dropped
  double hop_seconds = 0.010;
  long sample_rate = 0;

  long frames() const { return coeffs.ndim() == 2 ? coeffs.dim(0) : 0; }
};

// Full pipeline: pre-emphasis, framing with floor(N/hop) frames (tail
// zero-padded), symmetric Hamming window, power FFT, triangular mel
// filterbank, floored log, orthonormal DCT-II, drop c0.
// Throws DomainError if the waveform is shorter than one window.
MfccSequence mfcc(const std::vector<float>& waveform, const MfccConfig& cfg);

// Extracts the (kept_coeffs, width) block centered on video frame
// `frame_index` at `fps`: MFCC rows [c - w/2, c + w/2) with
// c = floor((frame_index + 0.5) / fps / hop_seconds), edge rows replicated.
// Rows of the result are coefficients, columns are time.
core::Tensor<double> align_block(const MfccSequence& seq, long frame_index,
                                 long fps, long width = 20);

// Memoizes MFCC sequences by sample id; training recomputes nothing.
class MfccCache {
 public:
  const MfccSequence& get_or_compute(const std::string& key,
                                     const std::vector<float>& waveform,
                                     const MfccConfig& cfg) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(key, mfcc(waveform, cfg)).first->second;
  }

  size_t size() const { return cache_.size(); }
  void clear() { cache_.clear(); }

 private:
  std::map<std::string, MfccSequence> cache_;
};

}  // namespace davs::audiofeat
