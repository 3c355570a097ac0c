// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/evalsuite/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "davs/audiofeat/mfcc.hpp"
#include "davs/core/autodiff.hpp"

namespace davs::evalsuite {

using core::NoGradGuard;
using core::Tensor;
using core::Var;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

audiofeat::MfccConfig mfcc_config_for(const avdata::Manifest& m) {
  audiofeat::MfccConfig cfg;
  cfg.sample_rate = m.toy.audio_sample_rate;
  cfg.validate();
  return cfg;
}

// (T, 1, 12, 20) audio feature blocks for one clip.
Tensor<float> audio_blocks(const avdata::SampleRecord& sample,
                           const audiofeat::MfccConfig& mfcc_cfg, long t,
                           long fps) {
  const auto seq = audiofeat::mfcc(sample.audio, mfcc_cfg);
  Tensor<float> out({t, 1, 12, 20});
  for (long f = 0; f < t; ++f) {
    const auto block = audiofeat::align_block(seq, f, fps);
    float* dst = out.data() + f * 12 * 20;
    for (long i = 0; i < 12 * 20; ++i) dst[i] = float(block[i]);
  }
  return out;
}

std::vector<long> argmax_rows(const Tensor<float>& logits) {
  const long n = logits.dim(0), c = logits.dim(1);
  std::vector<long> out(size_t(n), 0);
  for (long i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    long arg = 0;
    for (long k = 1; k < c; ++k)
      if (row[k] > row[arg]) arg = k;
    out[size_t(i)] = arg;
  }
  return out;
}

Tensor<float> normalize_rows(const Tensor<float>& x) {
  NoGradGuard ng;
  return core::rows_l2_normalize(Var<float>(x)).value();
}

void require_records(const avdata::Manifest& m, const char* what) {
  if (m.records.empty())
    throw DomainError(std::string(what) + ": manifest '" + m.split +
                      "' has no records");
}

}  // namespace

ClipFeatures extract_clip_features(const avdata::Manifest& m,
                                   const nets::DavsModel<float>& model) {
  require_records(m, "feature extraction");
  NoGradGuard ng;
  const auto mfcc_cfg = mfcc_config_for(m);
  const long n = long(m.records.size());
  const long t = m.toy.frames_per_clip;
  const long ld = model.cfg.latent_dim;

  ClipFeatures out;
  out.n = n;
  out.t = t;
  out.latent = ld;
  out.wid_visual = Tensor<float>({n, t * ld});
  out.wid_audio = Tensor<float>({n, t * ld});
  out.pid = Tensor<float>({n, t * ld});
  out.word_labels.resize(size_t(n));
  out.person_labels.resize(size_t(n));

  for (long i = 0; i < n; ++i) {
    const auto sample = avdata::load_record(m, i);
    const Var<float> visual(nets::nchw_from_hwc<float>(sample.frames));
    const Var<float> audio(audio_blocks(sample, mfcc_cfg, t, m.toy.fps));
    const auto fv = model.encode_vid_wid(visual).value();   // (T, latent)
    const auto fa = model.encode_aud_wid(audio).value();
    const auto fp = model.encode_pid(visual).value();
    std::copy_n(fv.data(), t * ld, out.wid_visual.data() + i * t * ld);
    std::copy_n(fa.data(), t * ld, out.wid_audio.data() + i * t * ld);
    std::copy_n(fp.data(), t * ld, out.pid.data() + i * t * ld);
    out.word_labels[size_t(i)] = sample.meta.word_id;
    out.person_labels[size_t(i)] = sample.meta.person_id;
  }
  return out;
}

RecognitionAccuracy recognition_accuracy(const avdata::Manifest& m,
                                         const nets::DavsModel<float>& model) {
  const auto feats = extract_clip_features(m, model);
  NoGradGuard ng;
  const auto logit_v = model.word_logits(Var<float>(feats.wid_visual)).value();
  const auto logit_a = model.word_logits(Var<float>(feats.wid_audio)).value();
  Tensor<float> fused(logit_v.shape());
  for (long i = 0; i < fused.numel(); ++i)
    fused[i] = 0.5f * (logit_v[i] + logit_a[i]);

  RecognitionAccuracy acc;
  acc.visual = accuracy_pct(argmax_rows(logit_v), feats.word_labels);
  acc.audio = accuracy_pct(argmax_rows(logit_a), feats.word_labels);
  acc.combined = accuracy_pct(argmax_rows(fused), feats.word_labels);

  // Person accuracy is per frame: the flattened (N, T*latent) rows are the
  // same memory layout as (N*T, latent) frame features.
  Tensor<float> pid_frames =
      Tensor<float>::from({feats.n * feats.t, feats.latent}, feats.pid.vec());
  const auto logit_p = model.person_logits(Var<float>(pid_frames)).value();
  std::vector<long> person_frame_labels(size_t(feats.n * feats.t));
  for (long i = 0; i < feats.n; ++i)
    for (long f = 0; f < feats.t; ++f)
      person_frame_labels[size_t(i * feats.t + f)] =
          feats.person_labels[size_t(i)];
  acc.person = accuracy_pct(argmax_rows(logit_p), person_frame_labels);
  return acc;
}

RetrievalResult retrieval(const avdata::Manifest& m,
                          const nets::DavsModel<float>& model,
                          const std::string& direction) {
  if (direction != "v2a" && direction != "a2v")
    throw ConfigError("retrieval direction must be 'v2a' or 'a2v', got '" +
                      direction + "'");
  const auto feats = extract_clip_features(m, model);
  const auto fv = normalize_rows(feats.wid_visual);
  const auto fa = normalize_rows(feats.wid_audio);
  return direction == "v2a" ? retrieval_from_features(fv, fa)
                            : retrieval_from_features(fa, fv);
}

double disentanglement_probe(const avdata::Manifest& train,
                             const avdata::Manifest& test,
                             const nets::DavsModel<float>& model,
                             const ProbeSpec& spec) {
  const auto train_feats = extract_clip_features(train, model);
  const auto test_feats = extract_clip_features(test, model);
  const auto probe = probe_fit(train_feats.pid, train_feats.word_labels,
                               train.toy.n_words, spec);
  return accuracy_pct(probe_predict(probe, test_feats.pid),
                      test_feats.word_labels);
}

GenerationFidelity generation_fidelity(const avdata::Manifest& m,
                                       const nets::DavsModel<float>& model,
                                       const std::string& source) {
  if (source != "audio" && source != "video")
    throw ConfigError("generation source must be 'audio' or 'video', got '" +
                      source + "'");
  require_records(m, "generation fidelity");
  NoGradGuard ng;
  const auto mfcc_cfg = mfcc_config_for(m);
  const long n = long(m.records.size());
  const long t = m.toy.frames_per_clip;
  const long ld = model.cfg.latent_dim;
  const std::vector<long> zeros(size_t(t), 0);  // broadcast rows for f_p

  Tensor<float> gen_features({n, t * ld});
  Tensor<float> real_features({n, t * ld});
  std::map<long, OpennessCalibration> calib;
  double sse = 0.0;
  long pixels = 0;
  double ssim_sum = 0.0, openness_sum = 0.0, id_sum = 0.0;

  for (long i = 0; i < n; ++i) {
    const auto sample = avdata::load_record(m, i);
    const auto visual_nchw = nets::nchw_from_hwc<float>(sample.frames);
    const Var<float> visual(visual_nchw);

    // Identity guidance: the clip's first frame.
    Tensor<float> guidance({1, 3, m.toy.frame_size, m.toy.frame_size});
    std::copy_n(visual_nchw.data(), guidance.numel(), guidance.data());
    const auto f_p = model.encode_pid(Var<float>(guidance));  // (1, latent)
    const auto f_p_rep = core::gather_rows(f_p, zeros);       // (T, latent)

    const Var<float> content =
        source == "audio"
            ? model.encode_aud_wid(
                  Var<float>(audio_blocks(sample, mfcc_cfg, t, m.toy.fps)))
            : model.encode_vid_wid(visual);
    const auto fake = model.decode(f_p_rep, content).value();  // (T,3,H,W)

    for (long k = 0; k < fake.numel(); ++k) {
      const double d = double(fake[k]) - double(visual_nchw[k]);
      sse += d * d;
    }
    pixels += fake.numel();

    const auto fake_hwc = nets::hwc_from_nchw(fake);
    ssim_sum += ssim(fake_hwc, sample.frames);

    auto cal = calib.find(sample.meta.person_id);
    if (cal == calib.end())
      cal = calib
                .emplace(sample.meta.person_id,
                         calibrate_openness(sample.meta.person_id, m.toy))
                .first;
    DAVS_CHECK(long(sample.meta.openness_truth.size()) == t,
               "generation fidelity: openness_truth length mismatch");
    double err2 = 0.0;
    Tensor<float> frame({m.toy.frame_size, m.toy.frame_size, 3});
    for (long f = 0; f < t; ++f) {
      std::copy_n(fake_hwc.data() + f * frame.numel(), frame.numel(),
                  frame.data());
      const double est = estimate_openness(frame, m.toy, cal->second);
      const double d = est - sample.meta.openness_truth[size_t(f)];
      err2 += d * d;
    }
    openness_sum += std::sqrt(err2 / double(t));

    // Identity drift: per-frame pid features of the generation vs the
    // guidance frame's, both unit-normalized.
    const auto fp_gen =
        normalize_rows(model.encode_pid(Var<float>(fake)).value());
    const auto fp_guide = normalize_rows(f_p.value());
    for (long f = 0; f < t; ++f) {
      double d2 = 0.0;
      for (long k = 0; k < ld; ++k) {
        const double d = double(fp_gen.at(f, k)) - double(fp_guide[k]);
        d2 += d * d;
      }
      id_sum += d2 / double(t);
    }

    const auto wv_gen = model.encode_vid_wid(Var<float>(fake)).value();
    std::copy_n(wv_gen.data(), t * ld, gen_features.data() + i * t * ld);
    const auto wv_real = model.encode_vid_wid(visual).value();
    std::copy_n(wv_real.data(), t * ld, real_features.data() + i * t * ld);
  }

  GenerationFidelity out;
  const double mse = sse / double(pixels);
  out.psnr_db = mse < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / mse);
  out.ssim = ssim_sum / double(n);
  out.openness_l2 = openness_sum / double(n);
  out.id_sq_l2 = id_sum / double(n);
  out.gen_retrieval_r1 =
      retrieval_from_features(normalize_rows(gen_features),
                              normalize_rows(real_features))
          .r1;
  return out;
}

// ---------------------------------------------------------------------------
// MetricReport

MetricReport::MetricReport()
    : visual_acc(kNan),
      audio_acc(kNan),
      combined_acc(kNan),
      retrieval_v2a_r1(kNan),
      retrieval_v2a_r10(kNan),
      retrieval_v2a_medr(kNan),
      retrieval_a2v_r1(kNan),
      retrieval_a2v_r10(kNan),
      retrieval_a2v_medr(kNan),
      psnr_db(kNan),
      ssim(kNan),
      probe_acc_before(kNan),
      probe_acc_after(kNan),
      gen_retrieval_r1(kNan),
      openness_l2(kNan),
      id_sq_l2(kNan) {}

namespace {

void check_pct(double v, const char* name) {
  if (!std::isnan(v) && !(v >= 0.0 && v <= 100.0))
    throw ContractError(std::string("metric report: ") + name +
                        " must be a percentage in [0, 100]");
}

double get_or_nan(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return kNan;
  return j.at(key).get<double>();
}

}  // namespace

void MetricReport::validate() const {
  check_pct(visual_acc, "visual_acc");
  check_pct(audio_acc, "audio_acc");
  check_pct(combined_acc, "combined_acc");
  check_pct(probe_acc_before, "probe_acc_before");
  check_pct(probe_acc_after, "probe_acc_after");
  check_pct(gen_retrieval_r1, "gen_retrieval_r1");
  for (auto [r1, r10, medr, dir] :
       {std::tuple{retrieval_v2a_r1, retrieval_v2a_r10, retrieval_v2a_medr,
                   "v2a"},
        std::tuple{retrieval_a2v_r1, retrieval_a2v_r10, retrieval_a2v_medr,
                   "a2v"}}) {
    check_pct(r1, dir);
    check_pct(r10, dir);
    if (!std::isnan(r1) && !std::isnan(r10) && r1 > r10)
      throw ContractError("metric report: R@1 must not exceed R@10");
    if (!std::isnan(medr) && medr < 1.0)
      throw ContractError("metric report: MedR must be >= 1");
  }
  if (!std::isnan(ssim) && !(ssim >= -1.0 && ssim <= 1.0))
    throw ContractError("metric report: ssim must lie in [-1, 1]");
  if (!std::isnan(psnr_db) && psnr_db > 100.0)
    throw ContractError("metric report: psnr_db is capped at 100 dB");
}

// Unset metrics carry NaN internally; in JSON they must be explicit nulls
// so partial reports stay machine-readable.
static nlohmann::json num_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

nlohmann::json metric_report_to_json(const MetricReport& r) {
  r.validate();
  nlohmann::json j;
  j["visual_acc"] = num_or_null(r.visual_acc);
  j["audio_acc"] = num_or_null(r.audio_acc);
  j["combined_acc"] = num_or_null(r.combined_acc);
  j["retrieval"] = {
      {"v2a",
       {{"R@1", num_or_null(r.retrieval_v2a_r1)},
        {"R@10", num_or_null(r.retrieval_v2a_r10)},
        {"MedR", num_or_null(r.retrieval_v2a_medr)}}},
      {"a2v",
       {{"R@1", num_or_null(r.retrieval_a2v_r1)},
        {"R@10", num_or_null(r.retrieval_a2v_r10)},
        {"MedR", num_or_null(r.retrieval_a2v_medr)}}}};
  j["psnr_db"] = num_or_null(r.psnr_db);
  j["ssim"] = num_or_null(r.ssim);
  j["probe_acc_before"] = num_or_null(r.probe_acc_before);
  j["probe_acc_after"] = num_or_null(r.probe_acc_after);
  j["gen_retrieval_r1"] = num_or_null(r.gen_retrieval_r1);
  j["openness_l2"] = num_or_null(r.openness_l2);
  j["id_sq_l2"] = num_or_null(r.id_sq_l2);
  j["config_hash"] = r.config_hash;
  j["checkpoint"] = r.checkpoint;
  j["generated_at"] = r.generated_at;
  return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.visual_acc = get_or_nan(j, "visual_acc");
    r.audio_acc = get_or_nan(j, "audio_acc");
    r.combined_acc = get_or_nan(j, "combined_acc");
    if (j.contains("retrieval")) {
      const auto& rt = j.at("retrieval");
      if (rt.contains("v2a")) {
        r.retrieval_v2a_r1 = get_or_nan(rt.at("v2a"), "R@1");
        r.retrieval_v2a_r10 = get_or_nan(rt.at("v2a"), "R@10");
        r.retrieval_v2a_medr = get_or_nan(rt.at("v2a"), "MedR");
      }
      if (rt.contains("a2v")) {
        r.retrieval_a2v_r1 = get_or_nan(rt.at("a2v"), "R@1");
        r.retrieval_a2v_r10 = get_or_nan(rt.at("a2v"), "R@10");
        r.retrieval_a2v_medr = get_or_nan(rt.at("a2v"), "MedR");
      }
    }
    r.psnr_db = get_or_nan(j, "psnr_db");
    r.ssim = get_or_nan(j, "ssim");
    r.probe_acc_before = get_or_nan(j, "probe_acc_before");
    r.probe_acc_after = get_or_nan(j, "probe_acc_after");
    r.gen_retrieval_r1 = get_or_nan(j, "gen_retrieval_r1");
    r.openness_l2 = get_or_nan(j, "openness_l2");
    r.id_sq_l2 = get_or_nan(j, "id_sq_l2");
    r.config_hash = j.value("config_hash", "");
    r.checkpoint = j.value("checkpoint", "");
    r.generated_at = j.value("generated_at", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metric report: ") + e.what());
  }
  r.validate();
  return r;
}

}  // namespace davs::evalsuite
