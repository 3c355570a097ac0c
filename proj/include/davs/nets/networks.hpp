// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "davs/core/autodiff.hpp"
#include "davs/core/error.hpp"
#include "davs/core/nn.hpp"
#include "davs/core/rng.hpp"
#include "davs/core/tensor.hpp"

namespace davs::nets {

using core::ConvLayer;
using core::LinearLayer;
using core::ParamStore;
using core::Rng;
using core::Shape;
using core::Tensor;
using core::Var;

// The ten trainable subnetwork groups. Groups are the unit of optimization,
// freezing and checkpointing; every parameter belongs to exactly one.
inline const std::vector<std::string>& subnetwork_groups() {
  static const std::vector<std::string> kGroups = {
      "adv_cls_person_on_wid", "adv_cls_word_on_pid", "cls_domain",
      "cls_person",            "cls_word_shared",     "decoder",
      "disc_seq",              "enc_aud_wid",         "enc_pid",
      "enc_vid_wid"};
  return kGroups;
}

struct NetworkConfig {
  long latent_dim = 256;
  long frame_size = 32;       // square frames, H == W
  long frames_per_clip = 16;  // T
  long n_words = 10;
  long n_persons = 20;
  std::vector<long> channels = {8, 16, 32, 64};  // encoder stage widths
  long gan_feature_dim = 64;  // per-frame feature fed to the temporal net
  std::string temporal_agg = "concat";  // "concat" or "mean" over T

  // Width of the one hidden layer in the sequence classifiers, tied to the
  // latent size so the default config gives a 512-wide head.
  long cls_hidden() const { return 2 * latent_dim; }

  void validate() const {
    if (latent_dim < 8) throw ConfigError("latent_dim must be >= 8");
    if (frame_size < 8 || frame_size > 256 ||
        (frame_size & (frame_size - 1)) != 0)
      throw ConfigError("frame_size must be a power of two in [8, 256]");
    if (frames_per_clip < 1 || frames_per_clip > 1024)
      throw ConfigError("frames_per_clip must be in [1, 1024]");
    if (n_words < 2) throw ConfigError("n_words must be >= 2");
    if (n_persons < 2) throw ConfigError("n_persons must be >= 2");
    if (channels.empty() || channels.size() > 8)
      throw ConfigError("channels must list 1..8 stage widths");
    for (long c : channels)
      if (c < 1 || c > 1024) throw ConfigError("channel widths must be in [1, 1024]");
    if (gan_feature_dim < 4) throw ConfigError("gan_feature_dim must be >= 4");
    if (temporal_agg != "concat" && temporal_agg != "mean")
      throw ConfigError("temporal_agg must be \"concat\" or \"mean\"");
  }

  bool operator==(const NetworkConfig&) const = default;
};

namespace detail {

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline void check_input(const std::string& op, const Shape& got,
                        const Shape& expect_tail) {
  bool ok = got.size() == expect_tail.size() + 1;
  if (ok)
    for (size_t i = 0; i < expect_tail.size(); ++i)
      ok = ok && got[i + 1] == expect_tail[i];
  if (!ok) {
    Shape want = expect_tail;
    want.insert(want.begin(), -1);
    throw ContractError(op + ": expected input shape " + shape_str(want) +
                        " (-1 = batch), got " + shape_str(got));
  }
}

}  // namespace detail

// Strided convolutional encoder: per-stage 3x3 stride-2 convolutions with
// leaky ReLU, global average pooling, then a linear map to the output width.
template <typename T>
struct ConvEncoder {
  std::vector<ConvLayer<T>> stages;
  LinearLayer<T> head;
  Shape input_chw;
  std::string op_name;

  ConvEncoder() = default;
  ConvEncoder(ParamStore<T>& ps, const Rng& rng, const std::string& group,
              std::string op, long in_c, long in_h, long in_w,
              const std::vector<long>& widths, long out_dim)
      : input_chw({in_c, in_h, in_w}), op_name(std::move(op)) {
    long c = in_c;
    for (size_t s = 0; s < widths.size(); ++s) {
      stages.emplace_back(ps, rng, group, "stage" + std::to_string(s), c,
                          widths[s], 3, 3, /*stride=*/2, /*pad=*/1);
      c = widths[s];
    }
    head = LinearLayer<T>(ps, rng, group, "head", c, out_dim);
  }

  // (N, C, H, W) -> (N, out_dim); row i depends only on input i.
  Var<T> operator()(Var<T> x) const {
    detail::check_input(op_name, x.shape(), input_chw);
    for (const auto& stage : stages) x = core::leaky_relu(stage(x), T(0.2));
    return head(core::global_avg_pool(x));
  }
};

// Decoder from a (pid, wid) latent pair to one frame. A linear seed is
// reshaped to a 1x1 image, then each stage doubles the resolution with
// bilinear upsampling followed by a 3x3 convolution; two refinement
// convolutions and a sigmoid output head finish at full resolution. With the
// default 64x64 config this is 10 convolutions and 6 upsampling stages.
template <typename T>
struct Decoder {
  LinearLayer<T> seed;
  ConvLayer<T> seed_conv;
  std::vector<ConvLayer<T>> up_convs;
  ConvLayer<T> refine1, refine2, out_conv;
  long latent_dim = 0;
  long n_up = 0;

  Decoder() = default;
  Decoder(ParamStore<T>& ps, const Rng& rng, const std::string& group,
          const NetworkConfig& cfg)
      : latent_dim(cfg.latent_dim) {
    for (long s = cfg.frame_size; s > 1; s /= 2) ++n_up;
    std::vector<long> rev(cfg.channels.rbegin(), cfg.channels.rend());
    auto width = [&](long i) {
      return rev[std::min<size_t>(static_cast<size_t>(i), rev.size() - 1)];
    };
    seed = LinearLayer<T>(ps, rng, group, "seed", 2 * cfg.latent_dim, width(0),
                          0.2);
    seed_conv =
        ConvLayer<T>(ps, rng, group, "seed_conv", width(0), width(0), 1, 1, 1, 0);
    for (long i = 0; i < n_up; ++i)
      up_convs.emplace_back(ps, rng, group, "up" + std::to_string(i), width(i),
                            width(i + 1), 3, 3, 1, 1);
    const long last = width(n_up);
    refine1 = ConvLayer<T>(ps, rng, group, "refine1", last, last, 3, 3, 1, 1);
    refine2 = ConvLayer<T>(ps, rng, group, "refine2", last, last, 3, 3, 1, 1);
    out_conv = ConvLayer<T>(ps, rng, group, "out", last, 3, 3, 3, 1, 1);
  }

  // (N, latent) x (N, latent) -> (N, 3, H, W) in (0, 1).
  Var<T> operator()(const Var<T>& f_p, const Var<T>& f_w) const {
    if (f_p.shape().size() != 2 || f_p.shape()[1] != latent_dim)
      throw ContractError("decode: pid latent must be (N," +
                          std::to_string(latent_dim) + "), got " +
                          detail::shape_str(f_p.shape()));
    if (f_w.shape().size() != 2 || f_w.shape()[1] != latent_dim)
      throw ContractError("decode: wid latent must be (N," +
                          std::to_string(latent_dim) + "), got " +
                          detail::shape_str(f_w.shape()));
    if (f_p.shape()[0] != f_w.shape()[0])
      throw ContractError("decode: pid/wid batch sizes differ: " +
                          detail::shape_str(f_p.shape()) + " vs " +
                          detail::shape_str(f_w.shape()));
    const long n = f_p.shape()[0];
    auto x = core::leaky_relu(seed(core::concat_cols(f_p, f_w)), T(0.2));
    x = core::reshape(x, {n, x.shape()[1], 1, 1});
    x = core::leaky_relu(seed_conv(x), T(0.2));
    for (const auto& conv : up_convs)
      x = core::leaky_relu(conv(core::bilinear_upsample2x(x)), T(0.2));
    x = core::leaky_relu(refine1(x), T(0.2));
    x = core::leaky_relu(refine2(x), T(0.2));
    return core::sigmoid(out_conv(x));
  }
};

// Classifier over a feature sequence: the T rows are concatenated (or mean
// pooled, per config) and passed through one hidden layer and a linear map.
template <typename T>
struct SeqClassifier {
  LinearLayer<T> hidden, out;
  long t = 0, d = 0;
  bool mean_agg = false;
  std::string op_name;

  SeqClassifier() = default;
  SeqClassifier(ParamStore<T>& ps, const Rng& rng, const std::string& group,
                std::string op, const NetworkConfig& cfg, long n_classes)
      : t(cfg.frames_per_clip),
        d(cfg.latent_dim),
        mean_agg(cfg.temporal_agg == "mean"),
        op_name(std::move(op)) {
    const long in_dim = mean_agg ? d : t * d;
    hidden = LinearLayer<T>(ps, rng, group, "hidden", in_dim, cfg.cls_hidden(),
                            0.2);
    out = LinearLayer<T>(ps, rng, group, "out", cfg.cls_hidden(), n_classes);
  }

  // (N, T*latent) -> (N, n_classes).
  Var<T> operator()(Var<T> seq_flat) const {
    if (seq_flat.shape().size() != 2 || seq_flat.shape()[1] != t * d)
      throw ContractError(op_name + ": expected flattened sequences (N," +
                          std::to_string(t) + "*" + std::to_string(d) +
                          "), got " + detail::shape_str(seq_flat.shape()));
    const long n = seq_flat.shape()[0];
    if (mean_agg)
      seq_flat = core::mean_rows_grouped(core::reshape(seq_flat, {n * t, d}), t);
    return out(core::leaky_relu(hidden(seq_flat), T(0.2)));
  }
};

// Temporal realness discriminator: a per-frame convolutional stack produces
// one feature row per frame; strided 1x3 convolutions along time and a
// sigmoid head score the whole clip.
template <typename T>
struct SeqDiscriminator {
  ConvEncoder<T> frame_net;
  std::vector<ConvLayer<T>> temporal;
  LinearLayer<T> score_head;
  long t = 0;

  SeqDiscriminator() = default;
  SeqDiscriminator(ParamStore<T>& ps, const Rng& rng, const std::string& group,
                   const NetworkConfig& cfg)
      : t(cfg.frames_per_clip) {
    frame_net = ConvEncoder<T>(ps, rng, group, "disc_seq(frame)", 3,
                               cfg.frame_size, cfg.frame_size, cfg.channels,
                               cfg.gan_feature_dim);
    long width = cfg.frames_per_clip;
    for (long i = 0; i < 2 && width >= 3; ++i) {
      temporal.emplace_back(ps, rng, group, "t" + std::to_string(i),
                            cfg.gan_feature_dim, cfg.gan_feature_dim, 1, 3, 2,
                            0);
      width = (width - 3) / 2 + 1;
    }
    score_head = LinearLayer<T>(ps, rng, group, "score", cfg.gan_feature_dim, 1);
  }

  // (N*T, 3, H, W) frames of N clips -> (N, 1) scores in (0, 1).
  Var<T> operator()(const Var<T>& frames, long clips) const {
    if (frames.shape().empty() || frames.shape()[0] != clips * t)
      throw ContractError("disc_seq: expected " + std::to_string(clips * t) +
                          " frames (" + std::to_string(clips) + " clips of " +
                          std::to_string(t) + "), got " +
                          detail::shape_str(frames.shape()));
    auto f = core::leaky_relu(frame_net(frames), T(0.2));
    auto x = core::rows_to_temporal(f, clips);
    for (const auto& conv : temporal) x = core::leaky_relu(conv(x), T(0.2));
    // Clamping the logit keeps the score strictly inside (0, 1) in single
    // precision: sigmoid(15) still rounds below 1.0f.
    auto logit = core::clamp_val(score_head(core::global_avg_pool(x)), T(-15),
                                 T(15));
    return core::sigmoid(logit);
  }
};

// The full model: three encoders, decoder, shared word classifier, person
// classifier, two adversarial classifiers, domain classifier and sequence
// discriminator, with parameters partitioned into the ten subnetwork groups.
template <typename T>
struct DavsModel {
  NetworkConfig cfg;
  ParamStore<T> params;

  ConvEncoder<T> enc_pid_net, enc_vid_wid_net, enc_aud_wid_net;
  Decoder<T> decoder_net;
  SeqClassifier<T> word_cls;      // shared by the visual and audio paths
  LinearLayer<T> person_cls;
  SeqClassifier<T> adv_word_cls;  // word recovery from pid features
  LinearLayer<T> adv_person_cls;  // person recovery from wid features
  LinearLayer<T> domain_cls;      // visual-vs-audio head
  SeqDiscriminator<T> disc;

  explicit DavsModel(const NetworkConfig& c, std::uint64_t seed = 1)
      : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    const long hw = cfg.frame_size;
    enc_pid_net = ConvEncoder<T>(params, rng, "enc_pid", "encode_pid", 3, hw,
                                 hw, cfg.channels, cfg.latent_dim);
    enc_vid_wid_net =
        ConvEncoder<T>(params, rng, "enc_vid_wid", "encode_vid_wid", 3, hw, hw,
                       cfg.channels, cfg.latent_dim);
    enc_aud_wid_net =
        ConvEncoder<T>(params, rng, "enc_aud_wid", "encode_aud_wid", 1, 12, 20,
                       cfg.channels, cfg.latent_dim);
    decoder_net = Decoder<T>(params, rng, "decoder", cfg);
    word_cls = SeqClassifier<T>(params, rng, "cls_word_shared",
                                "word_logits_shared", cfg, cfg.n_words);
    person_cls = LinearLayer<T>(params, rng, "cls_person", "head",
                                cfg.latent_dim, cfg.n_persons);
    adv_word_cls = SeqClassifier<T>(params, rng, "adv_cls_word_on_pid",
                                    "adv_word_logits_on_pid", cfg, cfg.n_words);
    adv_person_cls = LinearLayer<T>(params, rng, "adv_cls_person_on_wid",
                                    "head", cfg.latent_dim, cfg.n_persons);
    domain_cls =
        LinearLayer<T>(params, rng, "cls_domain", "head", cfg.latent_dim, 2);
    disc = SeqDiscriminator<T>(params, rng, "disc_seq", cfg);
    DAVS_CHECK(params.group_names() == subnetwork_groups(),
               "model must populate exactly the ten subnetwork groups");
  }

  // All image inputs are NCHW batches; per-frame ops put one frame per row.
  Var<T> encode_pid(const Var<T>& frames) const { return enc_pid_net(frames); }
  Var<T> encode_vid_wid(const Var<T>& frames) const {
    return enc_vid_wid_net(frames);
  }
  Var<T> encode_aud_wid(const Var<T>& blocks) const {
    return enc_aud_wid_net(blocks);
  }
  Var<T> decode(const Var<T>& f_p, const Var<T>& f_w) const {
    return decoder_net(f_p, f_w);
  }
  Var<T> word_logits(const Var<T>& seq_flat) const {
    return word_cls(seq_flat);
  }
  Var<T> person_logits(const Var<T>& f) const {
    check_latent("person_logits", f);
    return person_cls(f);
  }
  Var<T> adv_word_logits_on_pid(const Var<T>& seq_flat) const {
    return adv_word_cls(seq_flat);
  }
  Var<T> adv_person_logits_on_wid(const Var<T>& f) const {
    check_latent("adv_person_logits_on_wid", f);
    return adv_person_cls(f);
  }
  Var<T> domain_logits(const Var<T>& f) const {
    check_latent("domain_logits", f);
    return domain_cls(f);
  }
  Var<T> disc_seq_score(const Var<T>& frames, long clips) const {
    return disc(frames, clips);
  }

 private:
  void check_latent(const std::string& op, const Var<T>& f) const {
    if (f.shape().size() != 2 || f.shape()[1] != cfg.latent_dim)
      throw ContractError(op + ": expected latents (N," +
                          std::to_string(cfg.latent_dim) + "), got " +
                          detail::shape_str(f.shape()));
  }
};

// Layout conversion from dataset frames (T, H, W, 3) in [0,1] to the NCHW
// batches the networks consume.
template <typename T>
Tensor<T> nchw_from_hwc(const Tensor<float>& hwc) {
  DAVS_CHECK(hwc.ndim() == 4 && hwc.dim(3) == 3,
             "nchw_from_hwc expects (T,H,W,3)");
  const long t = hwc.dim(0), h = hwc.dim(1), w = hwc.dim(2);
  Tensor<T> out({t, 3, h, w});
  for (long i = 0; i < t; ++i)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        for (long c = 0; c < 3; ++c)
          out[((i * 3 + c) * h + y) * w + x] =
              static_cast<T>(hwc[((i * h + y) * w + x) * 3 + c]);
  return out;
}

// Inverse of nchw_from_hwc for a single decoded frame batch.
template <typename T>
Tensor<float> hwc_from_nchw(const Tensor<T>& nchw) {
  DAVS_CHECK(nchw.ndim() == 4 && nchw.dim(1) == 3,
             "hwc_from_nchw expects (N,3,H,W)");
  const long n = nchw.dim(0), h = nchw.dim(2), w = nchw.dim(3);
  Tensor<float> out({n, h, w, 3});
  for (long i = 0; i < n; ++i)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        for (long c = 0; c < 3; ++c)
          out[((i * h + y) * w + x) * 3 + c] =
              static_cast<float>(nchw[((i * 3 + c) * h + y) * w + x]);
  return out;
}

}  // namespace davs::nets
