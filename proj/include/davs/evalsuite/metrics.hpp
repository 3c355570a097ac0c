// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Model-free metric primitives: image quality (PSNR, SSIM), nearest-neighbor
// retrieval from feature matrices, a deterministic linear probe, and the toy
// mouth-openness estimator used by the generation-fidelity protocol.

#include <string>
#include <vector>

#include "davs/avdata/toyworld.hpp"
#include "davs/core/error.hpp"
#include "davs/core/tensor.hpp"

namespace davs::evalsuite {

// Peak signal-to-noise ratio in dB for images or frame stacks in [0, 1]:
// 10*log10(1/MSE), capped at 100 dB when MSE < 1e-10. The two tensors must
// have identical shape; every value must lie inside [0, 1].
double psnr(const core::Tensor<float>& a, const core::Tensor<float>& b);

// Mean structural similarity over an (H, W, 3) image or a (T, H, W, 3)
// stack: 11x11 Gaussian window (sigma 1.5) applied where it fully fits,
// K1=0.01, K2=0.03, dynamic range 1, averaged over window positions,
// channels and frames. Requires H, W >= 11 and values in [0, 1].
double ssim(const core::Tensor<float>& a, const core::Tensor<float>& b);

struct RetrievalResult {
  double r1 = 0.0;    // percentage of queries whose true pair ranks first
  double r10 = 0.0;   // percentage ranking within the top 10
  double medr = 0.0;  // median rank of the true pair (>= 1)
};

// Ranks candidate rows by squared Euclidean distance to each query row;
// query i's true match is candidate i. Distance ties are broken by candidate
// index, so results are deterministic. Both matrices must be (N, D) with
// N >= 2 (DomainError otherwise).
RetrievalResult retrieval_from_features(const core::Tensor<float>& queries,
                                        const core::Tensor<float>& candidates);

// Deterministic multinomial logistic probe: features are z-scored with the
// training statistics (zero-variance columns are dropped rather than
// crashing), weights start at zero, and the fit runs full-batch gradient
// descent with a backtracking (Armijo) line search for a fixed iteration
// budget. No randomness anywhere.
struct ProbeSpec {
  double l2_regularization = 1e-3;
  long max_iterations = 300;
  std::string feature_source = "pid_concat";
  std::string target = "word_id";

  void validate() const;
  bool operator==(const ProbeSpec&) const = default;
};

struct ProbeModel {
  long n_classes = 0;
  long n_features = 0;
  core::Tensor<double> weights;    // (n_classes, n_features)
  std::vector<double> bias;        // n_classes
  std::vector<double> mean, scale; // per-feature standardization
};

ProbeModel probe_fit(const core::Tensor<float>& x, const std::vector<long>& y,
                     long n_classes, const ProbeSpec& spec);
std::vector<long> probe_predict(const ProbeModel& m,
                                const core::Tensor<float>& x);

// Percentage of positions where pred == label; sizes must match.
double accuracy_pct(const std::vector<long>& pred,
                    const std::vector<long>& labels);

// --- Toy mouth-openness estimation -----------------------------------------
//
// The toy renderer draws the mouth as a dark ellipse whose height is affine
// in openness, inside a fixed pixel box. The estimator measures the dark-
// pixel mass in that box and maps it to [0, 1] with a per-identity
// calibration obtained by rendering the identity's closed and fully open
// mouths noise-free.

struct OpennessCalibration {
  double mass_closed = 0.0;
  double mass_open = 0.0;
};

// Soft count of mouth-dark pixels inside the mouth box of an (H, W, 3)
// frame in [0, 1].
double mouth_mass(const core::Tensor<float>& frame_hwc,
                  const avdata::ToyWorldConfig& cfg);

OpennessCalibration calibrate_openness(long person_id,
                                       const avdata::ToyWorldConfig& cfg);

double estimate_openness(const core::Tensor<float>& frame_hwc,
                         const avdata::ToyWorldConfig& cfg,
                         const OpennessCalibration& calib);

}  // namespace davs::evalsuite
