// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural audio-visual toy world. Each sample is a word spoken by an
// identity: the word fixes a lip-openness trajectory, the identity fixes the
// face geometry and color, the trajectory amplitude-modulates a fixed
// carrier tone. Everything is a pure function of (config, ids, seeds).

#pragma once

#include <cstdint>
#include <vector>

#include "davs/core/rng.hpp"
#include "davs/core/tensor.hpp"

namespace davs::avdata {

struct SplitCounts {
  long train = 2000;
  long val = 300;
  long test = 500;
};

struct ToyWorldConfig {
  long n_words = 10;
  long n_persons = 20;
  long frames_per_clip = 16;
  long frame_size = 32;  // square frames
  long fps = 25;
  long audio_sample_rate = 8000;
  double carrier_hz = 440.0;
  double trajectory_noise = 0.08;
  double render_noise = 0.01;
  std::uint64_t seed = 1234;
  SplitCounts counts;
  std::string frames_format = "f32raw";  // "f32raw" or "png"

  // Throws ConfigError on out-of-domain values.
  void validate() const;
};

// Face geometry and color for one person, derived deterministically from
// (config seed, person_id). Measurements are fractions of the frame size.
struct IdentityParams {
  long person_id = 0;
  double face_hue = 0.0;        // [0,1)
  double face_aspect = 1.0;     // width multiplier, [0.7, 1.3]
  double eye_spacing = 0.35;    // distance between eye centers, [0.2, 0.5]
  double mouth_baseline = 0.1;  // closed-mouth height fraction, [0.05, 0.2]
};

IdentityParams identity_params(long person_id, const ToyWorldConfig& cfg);

// Canonical openness curve of a word: one value per frame in [0, 1].
// Distinct words are guaranteed pairwise-distant trajectories.
std::vector<double> word_prototype(long word_id, const ToyWorldConfig& cfg);

// Prototype plus smooth per-instance noise of amplitude cfg.trajectory_noise,
// clamped to [0, 1]. Deterministic in all arguments; zero noise returns the
// prototype exactly.
std::vector<double> word_trajectory(long word_id, const ToyWorldConfig& cfg,
                                    std::uint64_t instance_seed);

// Renders one frame as (H, W, 3) float32 in [0, 1]. Openness only affects
// the mouth region; identity controls everything else. Per-pixel noise of
// amplitude cfg.render_noise is drawn from `noise_rng` when nonzero.
core::Tensor<float> render_toy_frame(const IdentityParams& id, double openness,
                                     const ToyWorldConfig& cfg,
                                     core::Rng& noise_rng);

// Mouth bounding box (pixel ranges, half-open) covering the mouth at any
// openness in [0, 1] plus the anti-aliasing margin. Pixels outside this box
// are independent of openness.
struct PixelBox {
  long row0, row1, col0, col1;
};
PixelBox mouth_pixel_box(const ToyWorldConfig& cfg);

// Amplitude-modulated carrier for an openness trajectory. Identity-free.
// Length is exactly frames_per_clip * sample_rate / fps samples (rounded).
std::vector<double> synth_audio(const std::vector<double>& openness,
                                const ToyWorldConfig& cfg);

// HSV (h in [0,1), s,v in [0,1]) to RGB, shared by renderer and tests.
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

}  // namespace davs::avdata
