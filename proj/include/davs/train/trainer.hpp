// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Two-phase training orchestrator. Phase 1 learns the joint audio-visual
// word embedding with adversarial disentanglement from the person embedding;
// phase 2 adds the frame decoder and temporal discriminator while keeping
// phase-1 supervision active. Every step alternates classifier and encoder
// sub-steps that update disjoint parameter groups: classifier sub-steps see
// only detached features, encoder sub-steps run with the opposing
// classifiers frozen, so the partition is structural rather than enforced by
// masking gradients after the fact.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "davs/audiofeat/mfcc.hpp"
#include "davs/avdata/dataset.hpp"
#include "davs/core/nn.hpp"
#include "davs/core/rng.hpp"
#include "davs/losses/losses.hpp"
#include "davs/nets/networks.hpp"
#include "json.hpp"

namespace davs::train {

struct AdamConfig {
  double beta1 = 0.5;  // GAN-stable first-moment decay
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

// Full training schedule and loss-selection switches. The enable_* flags
// exist for ablation runs (contrastive-only, no-disentanglement, L1-only
// generator); default is everything on.
struct TrainConfig {
  long batch_size = 18;
  double learning_rate = 1e-4;
  AdamConfig adam;
  long epochs_embed = 4;
  long epochs_gen = 5;
  losses::LossWeights weights;
  std::uint64_t seed = 1;
  std::string identity_guidance = "random_frame";  // or "first_frame"

  // Phase-2 behavior: keep phase-1 supervision running, or freeze the
  // encoders and tune the generator alone.
  bool keep_embed_supervision_in_gen = true;
  bool freeze_encoders_in_gen = false;

  // Classifier sub-steps performed per encoder sub-step.
  long cls_steps_per_enc_step = 1;

  // When > 0, every Nth step re-verifies that the sub-steps left all other
  // parameter groups bit-identical (debug aid; costs a full snapshot).
  long partition_check_every = 0;

  // Ablation switches.
  bool enable_contrastive = true;
  bool enable_shared_word = true;
  bool enable_person = true;
  bool enable_adversarial = true;  // Eq.-style classifier/uniform pairs
  bool enable_domain = true;       // two-domain adversary
  bool enable_gan = true;          // temporal GAN term in phase 2

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// What one step did: every loss value by name, plus the disjoint group sets
// updated by the two sub-steps.
struct StepReport {
  long step = 0;
  std::vector<std::pair<std::string, double>> losses;
  std::vector<std::string> updated_a;  // classifier / discriminator sub-step
  std::vector<std::string> updated_b;  // encoder / generator sub-step
};

// Progress marker persisted with every checkpoint.
struct TrainState {
  long epoch = 0;        // completed epochs
  long global_step = 0;  // batches consumed across all epochs
  std::string phase = "embed";  // "embed", "gen" or "done"
};

// Adaptive-moment optimizer holding one (m, v, t) state per parameter group,
// so a group stepped by two different sub-steps keeps one coherent moment
// history and untouched groups provably never move.
class Adam {
 public:
  Adam() = default;
  Adam(core::ParamStore<float>& params, double lr, const AdamConfig& cfg);

  // Applies one update to every parameter of the named groups using the
  // gradients currently stored on them (absent buffers count as zero).
  void step(const std::vector<std::string>& groups);

  std::vector<std::uint8_t> serialize() const;
  void deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  struct GroupState {
    long t = 0;
    std::vector<core::Tensor<float>> m, v;
  };

  core::ParamStore<float>* params_ = nullptr;
  double lr_ = 0.0;
  AdamConfig cfg_;
  std::map<std::string, GroupState> state_;
};

// One training run bound to a run directory:
//   run_dir/config.json                  network + train + weights sections
//   run_dir/checkpoints/epoch_K/         model arrays + optim.bin + trainstate.json
//   run_dir/checkpoints/crash/           written before a divergence error propagates
//   run_dir/logs/losses.csv              step,loss,value
//   run_dir/reports/epoch_K.json         per-epoch mean losses
class Trainer {
 public:
  // Fresh run: writes config.json and starts from random initialization.
  // `extra_sections` lets callers record additional top-level config
  // sections (for example the dataset recipe) in the same file; keys must
  // not collide with "network", "train" or "weights".
  Trainer(const std::filesystem::path& run_dir,
          const nets::NetworkConfig& net_cfg, const TrainConfig& cfg,
          avdata::Manifest train_manifest,
          const nlohmann::json& extra_sections = nlohmann::json::object());

  // Continues an existing run from its newest epoch checkpoint.
  static std::unique_ptr<Trainer> resume(const std::filesystem::path& run_dir,
                                         avdata::Manifest train_manifest);

  // One embedding-phase step on one batch: classifier sub-step (adversarial
  // word/person recovery + domain CE on detached features), then encoder
  // sub-step (shared word CE, contrastive, person CE, uniform pressures,
  // domain confusion) with the opposing classifiers frozen.
  StepReport embed_step(const avdata::Batch& batch);

  // One generator-phase step: discriminator sub-step on real vs detached
  // generated sequences (audio- and video-driven), then generator sub-step
  // on GAN + L1 reconstruction for both paths with the discriminator frozen.
  StepReport gen_step(const avdata::Batch& batch);

  // Runs up to `max_epochs` further epochs (all remaining when < 0),
  // checkpointing and logging each epoch. Returns the final checkpoint
  // directory. On divergence, writes checkpoints/crash and rethrows.
  std::filesystem::path run(long max_epochs = -1);

  const nets::DavsModel<float>& model() const { return *model_; }
  nets::DavsModel<float>& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  const nets::NetworkConfig& net_config() const { return net_cfg_; }
  const TrainState& state() const { return state_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }

  // Groups the two sub-steps of each phase may update under this config.
  std::vector<std::string> embed_groups_a() const;
  std::vector<std::string> embed_groups_b() const;
  std::vector<std::string> gen_groups_a() const;
  std::vector<std::string> gen_groups_b() const;

 private:
  Trainer(const std::filesystem::path& run_dir, avdata::Manifest manifest,
          bool resuming);

  struct Prepared {
    long n = 0;                         // samples
    core::Tensor<float> visual;         // (N*T, 3, H, W)
    core::Tensor<float> audio;          // (N*T, 1, 12, 20)
    core::Tensor<float> pairing;        // (N, N)
    std::vector<long> word_labels;      // per sample
    std::vector<long> person_labels;    // per frame row
  };

  Prepared prepare(const avdata::Batch& batch);
  const Prepared& sample_tensors(long index);

  void check_finite(const char* name, double value) const;
  void maybe_check_partition(const std::vector<std::string>& allowed,
                             const std::vector<std::vector<float>>& before,
                             const char* what) const;
  std::vector<std::vector<float>> snapshot_all() const;

  void append_csv(const StepReport& rep);
  void write_epoch_artifacts(long epoch,
                             const std::vector<StepReport>& reports,
                             double seconds);
  void save_checkpoint_dir(const std::filesystem::path& dir) const;
  void load_checkpoint_dir(const std::filesystem::path& dir);

  std::filesystem::path run_dir_;
  nets::NetworkConfig net_cfg_;
  TrainConfig cfg_;
  avdata::Manifest manifest_;
  std::unique_ptr<nets::DavsModel<float>> model_;
  Adam optim_;
  TrainState state_;
  core::Rng master_rng_{0};
  audiofeat::MfccConfig mfcc_cfg_;
  std::map<long, Prepared> sample_cache_;  // per-sample prepared tensors
  core::Rng guidance_rng_{0};  // re-seeded per epoch; advanced per gen batch
};

}  // namespace davs::train
