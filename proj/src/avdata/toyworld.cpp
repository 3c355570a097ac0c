// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/avdata/toyworld.hpp"

#include <algorithm>
#include <cmath>

#include "davs/core/error.hpp"

namespace davs::avdata {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Trajectory control grid: 4 segments, each holding one of 3 openness
// levels. word_id is read as a base-3 code, which bounds usable n_words at
// 3^4 = 81 and makes any two words differ on at least one whole segment.
constexpr int kSegments = 4;
constexpr double kLevels[3] = {0.15, 0.5, 0.85};
constexpr double kWiggleAmp = 0.03;

// Face layout in unit coordinates. The mouth stays inside the face ellipse
// at every legal openness and never overlaps the eyes.
constexpr double kFaceCx = 0.50, kFaceCy = 0.52;
constexpr double kFaceRx = 0.36, kFaceRy = 0.42;
constexpr double kEyeCy = 0.40, kEyeR = 0.045;
constexpr double kMouthCx = 0.50, kMouthCy = 0.70, kMouthRx = 0.18;
constexpr double kBg[3] = {0.08, 0.09, 0.11};
constexpr double kEyeColor[3] = {0.10, 0.10, 0.12};
constexpr double kMouthColor[3] = {0.25, 0.08, 0.10};

double frac(double x) { return x - std::floor(x); }

// Smooth interpolation through kSegments control values placed at segment
// centers, evaluated at frame-center time t in [0, 1]. Cosine easing keeps
// the curve C1 and inside the control range.
double control_curve(const double* ctrl, double t) {
  const double tau0 = 0.5 / kSegments;
  if (t <= tau0) return ctrl[0];
  const double last = (kSegments - 0.5) / kSegments;
  if (t >= last) return ctrl[kSegments - 1];
  const double pos = (t - tau0) * kSegments;
  const int k = std::min(kSegments - 2, static_cast<int>(pos));
  const double u = pos - k;
  const double w = 0.5 - 0.5 * std::cos(kPi * u);
  return ctrl[k] * (1.0 - w) + ctrl[k + 1] * w;
}

// Signed pixel distance to an ellipse boundary, approximated radially; used
// for one-pixel anti-aliased coverage.
double ellipse_coverage(double px, double py, double cx, double cy, double rx,
                        double ry, long frame_size) {
  const double dx = (px - cx) / rx;
  const double dy = (py - cy) / ry;
  const double e = std::sqrt(dx * dx + dy * dy);
  const double r_eff = std::sqrt(rx * ry) * frame_size;
  const double d_px = (e - 1.0) * r_eff;
  return std::clamp(0.5 - d_px, 0.0, 1.0);
}

void composite(double cov, const double* color, double* px) {
  for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - cov) + color[c] * cov;
}

double mouth_ry(const IdentityParams& id, double openness) {
  return (id.mouth_baseline + 0.25 * openness) / 2.0;
}

}  // namespace

void ToyWorldConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("toy config: " + msg); };
  if (n_words < 2 || n_words > 81)
    fail("n_words must be in [2, 81], got " + std::to_string(n_words));
  if (n_persons < 2 || n_persons > 4096)
    fail("n_persons must be in [2, 4096], got " + std::to_string(n_persons));
  if (frames_per_clip < 4 || frames_per_clip > 1024)
    fail("frames_per_clip must be in [4, 1024]");
  const bool pow2 = frame_size > 0 && (frame_size & (frame_size - 1)) == 0;
  if (!pow2 || frame_size < 8 || frame_size > 256)
    fail("frame_size must be a power of two in [8, 256]");
  if (fps < 1 || fps > 200) fail("fps must be in [1, 200]");
  if (audio_sample_rate < 4000 || audio_sample_rate > 48000)
    fail("audio_sample_rate must be in [4000, 48000]");
  if (carrier_hz <= 0 || carrier_hz >= audio_sample_rate / 2.0)
    fail("carrier_hz must be positive and below Nyquist");
  if (trajectory_noise < 0 || trajectory_noise > 0.5)
    fail("trajectory_noise must be in [0, 0.5]");
  if (render_noise < 0 || render_noise > 0.2)
    fail("render_noise must be in [0, 0.2]");
  if (counts.train < 0 || counts.val < 0 || counts.test < 0)
    fail("split counts must be non-negative");
  if (frames_format != "f32raw" && frames_format != "png")
    fail("frames_format must be 'f32raw' or 'png'");
}

IdentityParams identity_params(long person_id, const ToyWorldConfig& cfg) {
  DAVS_CHECK(person_id >= 0 && person_id < cfg.n_persons,
             "person_id out of range");
  core::Rng rng = core::Rng(cfg.seed).child("identity", person_id);
  IdentityParams id;
  id.person_id = person_id;
  // Golden-ratio hue spacing keeps any small set of identities in distinct
  // histogram bins; the jitter is small enough to preserve that.
  const double jitter = (rng.uniform() * 2.0 - 1.0) * 0.001;
  id.face_hue = frac(0.6180339887498949 * (person_id + 1) + jitter);
  id.face_aspect = 0.7 + 0.6 * rng.uniform();
  id.eye_spacing = 0.2 + 0.3 * rng.uniform();
  id.mouth_baseline = 0.05 + 0.15 * rng.uniform();
  return id;
}

std::vector<double> word_prototype(long word_id, const ToyWorldConfig& cfg) {
  DAVS_CHECK(word_id >= 0 && word_id < cfg.n_words, "word_id out of range");
  double ctrl[kSegments];
  long code = word_id;
  for (int k = 0; k < kSegments; ++k) {
    ctrl[k] = kLevels[code % 3];
    code /= 3;
  }
  core::Rng rng = core::Rng(cfg.seed).child("word-shape", word_id);
  const double phase = rng.uniform() * 2.0 * kPi;
  const double freq = 1.0 + 2.0 * rng.uniform();
  const long t_count = cfg.frames_per_clip;
  std::vector<double> out(t_count);
  for (long i = 0; i < t_count; ++i) {
    const double t = (i + 0.5) / t_count;
    double v = control_curve(ctrl, t) +
               kWiggleAmp * std::sin(2.0 * kPi * freq * t + phase);
    out[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

std::vector<double> word_trajectory(long word_id, const ToyWorldConfig& cfg,
                                    std::uint64_t instance_seed) {
  std::vector<double> out = word_prototype(word_id, cfg);
  if (cfg.trajectory_noise == 0.0) return out;
  core::Rng rng = core::Rng(cfg.seed).child("traj-noise", instance_seed);
  double ctrl[kSegments];
  for (int k = 0; k < kSegments; ++k) ctrl[k] = rng.uniform() * 2.0 - 1.0;
  const long t_count = cfg.frames_per_clip;
  for (long i = 0; i < t_count; ++i) {
    const double t = (i + 0.5) / t_count;
    out[i] = std::clamp(
        out[i] + cfg.trajectory_noise * control_curve(ctrl, t), 0.0, 1.0);
  }
  return out;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = frac(h) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

PixelBox mouth_pixel_box(const ToyWorldConfig& cfg) {
  const long hs = cfg.frame_size;
  // Widest possible mouth: baseline 0.2, openness 1 -> ry = 0.225.
  const double ry_max = (0.2 + 0.25) / 2.0;
  const double margin = 2.0 / hs;  // anti-aliasing spill
  PixelBox box;
  box.row0 = std::max<long>(0, static_cast<long>(std::floor((kMouthCy - ry_max - margin) * hs)));
  box.row1 = std::min<long>(hs, static_cast<long>(std::ceil((kMouthCy + ry_max + margin) * hs)));
  box.col0 = std::max<long>(0, static_cast<long>(std::floor((kMouthCx - kMouthRx - margin) * hs)));
  box.col1 = std::min<long>(hs, static_cast<long>(std::ceil((kMouthCx + kMouthRx + margin) * hs)));
  return box;
}

core::Tensor<float> render_toy_frame(const IdentityParams& id, double openness,
                                     const ToyWorldConfig& cfg,
                                     core::Rng& noise_rng) {
  DAVS_CHECK(openness >= 0.0 && openness <= 1.0,
             "openness must be in [0, 1]");
  const long hs = cfg.frame_size;
  double face_rgb[3];
  hsv_to_rgb(id.face_hue, 0.5, 0.82, face_rgb[0], face_rgb[1], face_rgb[2]);

  const double face_rx = kFaceRx * id.face_aspect;
  const double eye_dx = id.eye_spacing / 2.0;
  const double m_ry = mouth_ry(id, openness);

  core::Tensor<float> frame({hs, hs, 3});
  for (long i = 0; i < hs; ++i) {
    const double py = (i + 0.5) / hs;
    for (long j = 0; j < hs; ++j) {
      const double px = (j + 0.5) / hs;
      double out[3] = {kBg[0], kBg[1], kBg[2]};
      composite(ellipse_coverage(px, py, kFaceCx, kFaceCy, face_rx, kFaceRy, hs),
                face_rgb, out);
      composite(ellipse_coverage(px, py, kFaceCx - eye_dx, kEyeCy, kEyeR, kEyeR, hs),
                kEyeColor, out);
      composite(ellipse_coverage(px, py, kFaceCx + eye_dx, kEyeCy, kEyeR, kEyeR, hs),
                kEyeColor, out);
      composite(ellipse_coverage(px, py, kMouthCx, kMouthCy, kMouthRx, m_ry, hs),
                kMouthColor, out);
      float* dst = frame.data() + (i * hs + j) * 3;
      for (int c = 0; c < 3; ++c) {
        double v = out[c];
        if (cfg.render_noise > 0.0)
          v += noise_rng.uniform(-cfg.render_noise, cfg.render_noise);
        dst[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return frame;
}

std::vector<double> synth_audio(const std::vector<double>& openness,
                                const ToyWorldConfig& cfg) {
  DAVS_CHECK(static_cast<long>(openness.size()) == cfg.frames_per_clip,
             "synth_audio: trajectory length must equal frames_per_clip");
  for (double v : openness)
    DAVS_CHECK(v >= 0.0 && v <= 1.0, "synth_audio: openness out of [0, 1]");
  const long sr = cfg.audio_sample_rate;
  const long n = static_cast<long>(std::llround(
      static_cast<double>(cfg.frames_per_clip) * sr / cfg.fps));
  std::vector<double> wave(n);
  for (long s = 0; s < n; ++s) {
    const long frame = std::min<long>(cfg.frames_per_clip - 1,
                                      s * cfg.fps / sr);
    wave[s] = openness[frame] * std::sin(2.0 * kPi * cfg.carrier_hz * s / sr);
  }
  return wave;
}

}  // namespace davs::avdata
