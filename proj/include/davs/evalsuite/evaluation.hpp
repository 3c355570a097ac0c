// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dataset-level evaluation protocols: word recognition from either modality,
// cross-modal retrieval, the identity-feature word probe, and generation
// fidelity (retrieval back to the source, lip-sync error, identity drift,
// pixel quality). All protocols are deterministic functions of (model
// parameters, manifest, spec) and never touch gradients.

#include <string>
#include <vector>

#include "davs/avdata/dataset.hpp"
#include "davs/evalsuite/metrics.hpp"
#include "davs/nets/networks.hpp"
#include "json.hpp"

namespace davs::evalsuite {

// Per-clip sequence features of a whole manifest, extracted with frozen
// weights: flattened (N, T*latent) rows for both word streams and the
// person stream, plus labels.
struct ClipFeatures {
  long n = 0, t = 0, latent = 0;
  core::Tensor<float> wid_visual;  // (N, T*latent)
  core::Tensor<float> wid_audio;   // (N, T*latent)
  core::Tensor<float> pid;         // (N, T*latent)
  std::vector<long> word_labels;   // per clip
  std::vector<long> person_labels; // per clip
};

ClipFeatures extract_clip_features(const avdata::Manifest& m,
                                   const nets::DavsModel<float>& model);

struct RecognitionAccuracy {
  double visual = 0.0;    // word accuracy from the visual stream, percent
  double audio = 0.0;     // word accuracy from the audio stream
  double combined = 0.0;  // argmax of the mean of the two logit vectors
  double person = 0.0;    // person accuracy from per-frame identity features
};

RecognitionAccuracy recognition_accuracy(const avdata::Manifest& m,
                                         const nets::DavsModel<float>& model);

// direction is "v2a" (visual queries, audio candidates) or "a2v". Features
// are the unit-normalized flattened word-stream sequences, matching the
// training-time contrastive geometry.
RetrievalResult retrieval(const avdata::Manifest& m,
                          const nets::DavsModel<float>& model,
                          const std::string& direction);

// Fits the probe on the train manifest's concatenated per-frame identity
// features against word labels and reports test-manifest accuracy (percent).
double disentanglement_probe(const avdata::Manifest& train,
                             const avdata::Manifest& test,
                             const nets::DavsModel<float>& model,
                             const ProbeSpec& spec);

// Generates every test clip from its first frame (identity guidance) and the
// chosen speech source, then scores the generations.
struct GenerationFidelity {
  double gen_retrieval_r1 = 0.0;  // R@1 matching generations to source clips
  double openness_l2 = 0.0;       // mean per-clip RMS lip-openness error
  double id_sq_l2 = 0.0;          // mean squared L2 identity-feature drift
  double psnr_db = 0.0;           // pixel quality vs ground-truth frames
  double ssim = 0.0;
};

GenerationFidelity generation_fidelity(const avdata::Manifest& m,
                                       const nets::DavsModel<float>& model,
                                       const std::string& source);

// The flat report written by one evaluation invocation. Fields hold NaN
// until their protocol runs; NaN serializes as JSON null.
struct MetricReport {
  double visual_acc, audio_acc, combined_acc;
  double retrieval_v2a_r1, retrieval_v2a_r10, retrieval_v2a_medr;
  double retrieval_a2v_r1, retrieval_a2v_r10, retrieval_a2v_medr;
  double psnr_db, ssim;
  double probe_acc_before, probe_acc_after;
  double gen_retrieval_r1, openness_l2, id_sq_l2;
  std::string config_hash;
  std::string checkpoint;
  std::string generated_at;  // informational; excluded from comparisons

  MetricReport();

  // Checks ranges of every populated (non-NaN) field: percentages in
  // [0, 100], R@1 <= R@10, MedR >= 1, SSIM in [-1, 1].
  void validate() const;
};

nlohmann::json metric_report_to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);

}  // namespace davs::evalsuite
