// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training objectives: audio-visual contrastive alignment, word/person
// cross-entropy, adversarial classifier/encoder pairs that push softmax
// outputs toward uniform, the two-domain adversary, L1 reconstruction and the
// temporal GAN objective. Every function is a pure map from autodiff
// variables to a scalar variable; gradient routing (which parameters a step
// may update) is expressed structurally, by detaching features for
// classifier-side losses and freezing classifier parameters for encoder-side
// losses, never by zeroing gradients after the fact.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "davs/core/autodiff.hpp"
#include "davs/core/error.hpp"
#include "davs/core/tensor.hpp"

namespace davs::losses {

using core::Tensor;
using core::Var;

// Scalar weights applied when the per-phase objectives are combined.
struct LossWeights {
  double alpha = 100.0;  // reconstruction L1 weight inside the generator loss
  double lambda_contrastive = 1.0;
  double lambda_shared_word = 1.0;
  double lambda_domain = 1.0;
  double lambda_person = 1.0;
  double lambda_adv_uniform = 1.0;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha))
      throw ConfigError("LossWeights: alpha must be a finite positive value");
    const double ls[] = {lambda_contrastive, lambda_shared_word, lambda_domain,
                         lambda_person, lambda_adv_uniform};
    const char* names[] = {"lambda_contrastive", "lambda_shared_word",
                           "lambda_domain", "lambda_person",
                           "lambda_adv_uniform"};
    for (int i = 0; i < 5; ++i)
      if (!(ls[i] >= 0.0) || !std::isfinite(ls[i]))
        throw ConfigError(std::string("LossWeights: ") + names[i] +
                          " must be a finite value >= 0");
  }

  bool operator==(const LossWeights&) const = default;
};

namespace detail {

// Throws unless every row of x has unit L2 norm within tol. Norms are
// accumulated in double so the check is meaningful for float rows of any
// practical width.
template <typename T>
void require_unit_rows(const Var<T>& x, const char* what, double tol) {
  const long n = x.shape()[0], d = x.shape()[1];
  for (long i = 0; i < n; ++i) {
    const T* row = x.value().data() + i * d;
    double s = 0.0;
    for (long j = 0; j < d; ++j) s += double(row[j]) * double(row[j]);
    const double norm = std::sqrt(s);
    if (std::abs(norm - 1.0) > tol)
      throw ContractError(std::string(what) + ": row " + std::to_string(i) +
                          " has L2 norm " + std::to_string(norm) +
                          ", expected 1 within " + std::to_string(tol));
  }
}

inline void require_labels_in_range(const std::vector<long>& labels,
                                    long n_classes, const char* what) {
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw DomainError(std::string(what) + ": label " +
                        std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " outside [0, " +
                        std::to_string(n_classes) + ")");
}

}  // namespace detail

// Pairwise alignment of visual and audio sequence features. Rows of `visual`
// and `audio` are whole-sequence feature vectors, already L2-normalized;
// labels[m*N + n] is 1 when visual row m and audio row n belong to the same
// clip, else 0. Paired entries contribute their distance d_mn; unpaired
// entries contribute max(1 - d_mn, 0). The result is the sum over all pairs.
template <typename T>
Var<T> contrastive_loss(const Var<T>& visual, const Var<T>& audio,
                        const Tensor<T>& labels) {
  if (visual.shape().size() != 2 || audio.shape().size() != 2 ||
      visual.shape() != audio.shape())
    throw ContractError(
        "contrastive_loss: visual and audio must share an (N,D) shape");
  const long n = visual.shape()[0];
  if (labels.shape() != std::vector<long>({n, n}))
    throw ContractError("contrastive_loss: labels must be (N,N)");
  for (long i = 0; i < labels.numel(); ++i)
    if (labels[i] != T(0) && labels[i] != T(1))
      throw ContractError("contrastive_loss: labels must be 0 or 1");
  detail::require_unit_rows(visual, "contrastive_loss: visual", 1e-6);
  detail::require_unit_rows(audio, "contrastive_loss: audio", 1e-6);

  Var<T> l(labels);
  Tensor<T> inv = labels;
  for (long i = 0; i < inv.numel(); ++i) inv[i] = T(1) - inv[i];
  Var<T> one_minus_l(std::move(inv));

  auto d = core::pair_l2_dist(visual, audio);
  auto paired = core::sum_all(core::mul(l, d));
  auto margin = core::relu(core::rsub_scalar(T(1), d));
  auto unpaired = core::sum_all(core::mul(one_minus_l, margin));
  return core::add(paired, unpaired);
}

// Softmax cross-entropy of (N, C) logits against integer labels, mean over
// rows. Out-of-range labels are rejected before any graph is built.
template <typename T>
Var<T> softmax_ce(const Var<T>& logits, const std::vector<long>& labels,
                  const char* what) {
  if (logits.shape().size() != 2)
    throw ContractError(std::string(what) + ": logits must be (N,C)");
  if (static_cast<long>(labels.size()) != logits.shape()[0])
    throw ContractError(std::string(what) +
                        ": label count must match logit rows");
  detail::require_labels_in_range(labels, logits.shape()[1], what);
  return core::nll_mean(core::log_softmax_rows(logits), labels);
}

// Word supervision on the shared classifier's logits.
template <typename T>
Var<T> word_ce(const Var<T>& logits, const std::vector<long>& labels) {
  return softmax_ce(logits, labels, "word_ce");
}
template <typename T>
Var<T> word_ce(const Var<T>& logits, long label) {
  return word_ce(logits, std::vector<long>{label});
}

// Person supervision on the person classifier's logits.
template <typename T>
Var<T> person_ce(const Var<T>& logits, const std::vector<long>& labels) {
  return softmax_ce(logits, labels, "person_ce");
}
template <typename T>
Var<T> person_ce(const Var<T>& logits, long label) {
  return person_ce(logits, std::vector<long>{label});
}

// Classifier step of the adversarial pair on person-ID features: trains the
// word classifier that reads pid features to predict the word. Features are
// detached, so no gradient can reach the encoder that produced them.
template <typename T, typename LogitsFn>
Var<T> adv_cls_ce_word_on_pid(LogitsFn&& word_logits_of,
                              const Var<T>& pid_features,
                              const std::vector<long>& word_labels) {
  auto logits = word_logits_of(pid_features.detach());
  return softmax_ce(logits, word_labels, "adv_cls_ce_word_on_pid");
}

// Mirror image: trains the person classifier that reads word-ID features.
template <typename T, typename LogitsFn>
Var<T> adv_cls_ce_person_on_wid(LogitsFn&& person_logits_of,
                                const Var<T>& wid_features,
                                const std::vector<long>& person_labels) {
  auto logits = person_logits_of(wid_features.detach());
  return softmax_ce(logits, person_labels, "adv_cls_ce_person_on_wid");
}

// Mean over rows of the squared Euclidean gap to the uniform distribution:
// (1/N) sum_i sum_j (p_ij - 1/C)^2. Zero exactly at uniform rows, where its
// gradient also vanishes. Rows must already sum to 1 (softmax outputs).
template <typename T>
Var<T> uniform_pressure(const Var<T>& probs) {
  if (probs.shape().size() != 2)
    throw ContractError("uniform_pressure: probs must be (N,C)");
  const long n = probs.shape()[0], c = probs.shape()[1];
  for (long i = 0; i < n; ++i) {
    double s = 0.0;
    for (long j = 0; j < c; ++j) s += double(probs.value()[i * c + j]);
    if (std::abs(s - 1.0) > 1e-6)
      throw ContractError("uniform_pressure: row " + std::to_string(i) +
                          " sums to " + std::to_string(s) +
                          ", expected 1 within 1e-6");
  }
  auto centered = core::add_scalar(probs, T(-1) / T(c));
  return core::scale(core::sum_all(core::mul(centered, centered)),
                     T(1) / T(n));
}

// Encoder step of the adversarial pairs: push the (frozen) classifier's
// softmax toward uniform. Freezing is the caller's job: gradient flow through
// an op is gated by each parameter's requires_grad flag at backward() time,
// so the classifier's FreezeGuard must stay alive until this loss has been
// backwarded (training sub-steps hold it across forward and backward).
template <typename T>
Var<T> adv_enc_uniform_word(const Var<T>& softmax_probs) {
  return uniform_pressure(softmax_probs);
}
template <typename T>
Var<T> adv_enc_uniform_person(const Var<T>& softmax_probs) {
  return uniform_pressure(softmax_probs);
}

// Two-domain adversary over word-ID features (visual domain 0, audio domain
// 1). Returns {classifier_loss, encoder_loss}: the classifier loss is CE on
// detached features, so only the domain classifier learns from it; the
// encoder loss is the uniform pressure on the live features, and the caller
// must hold the classifier's FreezeGuard across that loss's backward() so
// only the encoders learn from it.
template <typename T, typename LogitsFn>
std::pair<Var<T>, Var<T>> domain_adv_pair(
    LogitsFn&& domain_logits_of, const Var<T>& features,
    const std::vector<long>& domain_labels) {
  for (size_t i = 0; i < domain_labels.size(); ++i)
    if (domain_labels[i] != 0 && domain_labels[i] != 1)
      throw DomainError("domain_adv_pair: label " +
                        std::to_string(domain_labels[i]) + " at index " +
                        std::to_string(i) + " must be 0 or 1");
  auto cls_logits = domain_logits_of(features.detach());
  if (cls_logits.shape().size() != 2 || cls_logits.shape()[1] != 2)
    throw ContractError("domain_adv_pair: classifier must emit (N,2) logits");
  auto classifier_loss =
      softmax_ce(cls_logits, domain_labels, "domain_adv_pair");
  auto encoder_loss =
      uniform_pressure(core::softmax_rows(domain_logits_of(features)));
  return {std::move(classifier_loss), std::move(encoder_loss)};
}

// Mean absolute difference over all elements of two equal-shape tensors.
template <typename T>
Var<T> l1_recon(const Var<T>& generated, const Var<T>& target) {
  if (generated.shape() != target.shape())
    throw ContractError("l1_recon: generated and target shapes must match");
  return core::mean_all(core::abs_val(core::sub(generated, target)));
}

template <typename T>
struct GanLosses {
  Var<T> d_loss;
  Var<T> g_loss;
};

// Realness game on discriminator scores (each entry strictly inside (0,1)).
// d_loss = -mean log(real) - mean log(1 - fake) rewards separating real from
// fake; g_loss = -mean log(fake) is the non-saturating generator objective.
// The caller detaches fake frames before the discriminator pass used for
// d_loss so the generator never learns from the discriminator's step.
template <typename T>
GanLosses<T> gan_losses(const Var<T>& disc_real, const Var<T>& disc_fake) {
  for (const auto* v : {&disc_real, &disc_fake})
    for (long i = 0; i < v->value().numel(); ++i) {
      const T s = v->value()[i];
      if (!(s > T(0) && s < T(1)))
        throw ContractError("gan_losses: scores must lie strictly in (0,1)");
    }
  const T lo = T(1e-7);
  auto d_loss = core::neg(
      core::add(core::mean_all(core::log_clamped(disc_real, lo)),
                core::mean_all(
                    core::log_clamped(core::rsub_scalar(T(1), disc_fake), lo))));
  auto g_loss = core::neg(core::mean_all(core::log_clamped(disc_fake, lo)));
  return {std::move(d_loss), std::move(g_loss)};
}

// Full generator objective: GAN term plus alpha-weighted L1 reconstruction.
template <typename T>
Var<T> total_recon(const Var<T>& gan_g_loss, const Var<T>& l1,
                   const LossWeights& weights) {
  weights.validate();
  return core::add(gan_g_loss, core::scale(l1, T(weights.alpha)));
}

}  // namespace davs::losses
