// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "davs/avdata/dataset.hpp"
#include "davs/core/io_util.hpp"
#include "davs/core/rng.hpp"
#include "davs/nets/checkpoint.hpp"
#include "davs/train/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace davs;
using namespace davs::train;
using avdata::Batch;
using avdata::Manifest;
using avdata::ToyWorldConfig;
using core::ParamStore;
using core::Rng;
using core::Tensor;
using core::Var;
using nets::DavsModel;
using nets::NetworkConfig;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("davs_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ToyWorldConfig tiny_toy() {
  ToyWorldConfig cfg;
  cfg.n_words = 3;
  cfg.n_persons = 4;
  cfg.frames_per_clip = 4;
  cfg.frame_size = 16;
  cfg.counts = {12, 2, 4};
  cfg.seed = 77;
  return cfg;
}

NetworkConfig tiny_net() {
  NetworkConfig cfg;
  cfg.latent_dim = 8;
  cfg.frame_size = 16;
  cfg.frames_per_clip = 4;
  cfg.n_words = 3;
  cfg.n_persons = 4;
  cfg.channels = {4, 6};
  cfg.gan_feature_dim = 8;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.epochs_embed = 1;
  cfg.epochs_gen = 1;
  cfg.seed = 5;
  return cfg;
}

// One shared tiny dataset for all cases; generation is deterministic.
const Manifest& train_manifest() {
  static const Manifest m = [] {
    const auto dir = temp_dir("data");
    const auto paths = avdata::generate_toy_dataset(tiny_toy(), dir);
    return avdata::load_manifest(paths[0]);
  }();
  return m;
}

std::vector<Batch> first_batches(long batch_size = 4) {
  return avdata::iterate_batches(train_manifest(), batch_size, 99,
                                 avdata::BatchMode::kTrain);
}

std::vector<std::vector<float>> snapshot_all(const DavsModel<float>& model) {
  std::vector<std::vector<float>> out;
  for (const auto& g : nets::subnetwork_groups())
    out.push_back(model.params.snapshot(g));
  return out;
}

bool group_unchanged(const DavsModel<float>& model,
                     const std::vector<std::vector<float>>& before,
                     const std::string& group) {
  const auto& names = nets::subnetwork_groups();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == group) return model.params.snapshot(group) == before[i];
  return false;
}

bool has_loss(const StepReport& rep, const std::string& name) {
  for (const auto& [n, v] : rep.losses)
    if (n == name) return std::isfinite(v);
  return false;
}

std::string read_text(const fs::path& p) { return core::read_file_text(p); }

}  // namespace

TEST_CASE("train config validates and round-trips through JSON") {
  TrainConfig cfg = tiny_train();
  CHECK_NOTHROW(cfg.validate());

  const auto j = train_config_to_json(cfg);
  const TrainConfig back = train_config_from_json(j);
  CHECK(back == cfg);

  TrainConfig bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.adam.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.epochs_embed = 0;
  bad.epochs_gen = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.identity_guidance = "middle_frame";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.cls_steps_per_enc_step = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.weights.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto extra = j;
  extra["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(extra), ConfigError);
  auto missing = j;
  missing.erase("seed");
  CHECK_THROWS_AS(train_config_from_json(missing), ConfigError);
  auto bad_adam = j;
  bad_adam["adam"].erase("eps");
  CHECK_THROWS_AS(train_config_from_json(bad_adam), ConfigError);
}

TEST_CASE("optimizer updates only the requested groups") {
  DavsModel<float> model(tiny_net(), 9);
  Adam opt(model.params, 1e-2, AdamConfig{});
  Rng rng(3);

  Tensor<float> feat({2, tiny_net().latent_dim});
  for (long i = 0; i < feat.numel(); ++i) feat[i] = float(rng.normal());

  const auto before = snapshot_all(model);
  model.params.zero_grad();
  auto loss = core::mean_all(model.person_logits(Var<float>(feat)));
  loss.backward();
  opt.step({"cls_person"});

  CHECK_FALSE(group_unchanged(model, before, "cls_person"));
  for (const auto& g : nets::subnetwork_groups())
    if (g != "cls_person") CHECK(group_unchanged(model, before, g));

  // Stepping a group whose gradients are all zero must leave it bit-identical.
  const auto before2 = snapshot_all(model);
  opt.step({"decoder"});
  CHECK(group_unchanged(model, before2, "decoder"));

  CHECK_THROWS_AS(opt.step({"no_such_group"}), ContractError);
}

TEST_CASE("optimizer state serializes and restores bit-exactly") {
  DavsModel<float> model(tiny_net(), 9);
  Adam opt(model.params, 1e-2, AdamConfig{});
  Rng rng(4);
  Tensor<float> feat({2, tiny_net().latent_dim});
  for (long i = 0; i < feat.numel(); ++i) feat[i] = float(rng.normal());
  for (int it = 0; it < 3; ++it) {
    model.params.zero_grad();
    core::mean_all(model.person_logits(Var<float>(feat))).backward();
    opt.step({"cls_person"});
  }

  const auto bytes = opt.serialize();
  DavsModel<float> model2(tiny_net(), 9);
  Adam opt2(model2.params, 1e-2, AdamConfig{});
  opt2.deserialize(bytes);
  CHECK(opt2.serialize() == bytes);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 9);
  CHECK_THROWS_AS(opt2.deserialize(truncated), FormatError);
  auto corrupt = bytes;
  corrupt[0] = 'X';
  CHECK_THROWS_AS(opt2.deserialize(corrupt), FormatError);

  // A store with differently sized parameters cannot accept this state.
  NetworkConfig other = tiny_net();
  other.latent_dim = 16;
  DavsModel<float> model3(other, 9);
  Adam opt3(model3.params, 1e-2, AdamConfig{});
  CHECK_THROWS_AS(opt3.deserialize(bytes), FormatError);
}

TEST_CASE("trainer writes its config and rejects a mismatched dataset") {
  const auto dir = temp_dir("ctor");
  Trainer t(dir, tiny_net(), tiny_train(), train_manifest());
  const auto j = nlohmann::json::parse(read_text(dir / "config.json"));
  CHECK(nets::network_config_from_json(j.at("network")) == tiny_net());
  nlohmann::json tj = j.at("train");
  tj["weights"] = j.at("weights");
  CHECK(train_config_from_json(tj) == tiny_train());

  NetworkConfig wrong = tiny_net();
  wrong.n_words = 5;
  CHECK_THROWS_AS(
      Trainer(temp_dir("ctor2"), wrong, tiny_train(), train_manifest()),
      ContractError);
  wrong = tiny_net();
  wrong.frame_size = 32;
  CHECK_THROWS_AS(
      Trainer(temp_dir("ctor3"), wrong, tiny_train(), train_manifest()),
      ContractError);
}

TEST_CASE("embedding step updates its sub-step groups and no others") {
  TrainConfig cfg = tiny_train();
  cfg.partition_check_every = 1;  // enable the trainer's own snapshots too
  Trainer t(temp_dir("embed_step"), tiny_net(), cfg, train_manifest());
  const auto batches = first_batches();
  REQUIRE(batches.size() == 3);

  const auto before = snapshot_all(t.model());
  const StepReport rep = t.embed_step(batches[0]);

  CHECK(rep.updated_a == std::vector<std::string>{
                             "adv_cls_person_on_wid", "adv_cls_word_on_pid",
                             "cls_domain"});
  CHECK(rep.updated_b == std::vector<std::string>{
                             "cls_person", "cls_word_shared", "enc_aud_wid",
                             "enc_pid", "enc_vid_wid"});

  for (const auto& g : rep.updated_a)
    CHECK_FALSE(group_unchanged(t.model(), before, g));
  for (const auto& g : rep.updated_b)
    CHECK_FALSE(group_unchanged(t.model(), before, g));
  CHECK(group_unchanged(t.model(), before, "decoder"));
  CHECK(group_unchanged(t.model(), before, "disc_seq"));

  for (const char* name :
       {"embedA/adv_word", "embedA/adv_person", "embedA/domain",
        "embedB/word_visual", "embedB/word_audio", "embedB/contrastive",
        "embedB/person", "embedB/uniform_word", "embedB/uniform_person",
        "embedB/domain_confusion"})
    CHECK_MESSAGE(has_loss(rep, name), name);
}

TEST_CASE("generator step trains discriminator and generator on disjoint "
          "groups") {
  TrainConfig cfg = tiny_train();
  cfg.partition_check_every = 1;
  Trainer t(temp_dir("gen_step"), tiny_net(), cfg, train_manifest());
  const auto batches = first_batches();

  const auto before = snapshot_all(t.model());
  const StepReport rep = t.gen_step(batches[0]);

  CHECK(rep.updated_a == std::vector<std::string>{"disc_seq"});
  CHECK(rep.updated_b == std::vector<std::string>{
                             "decoder", "enc_aud_wid", "enc_pid",
                             "enc_vid_wid"});
  CHECK_FALSE(group_unchanged(t.model(), before, "disc_seq"));
  CHECK_FALSE(group_unchanged(t.model(), before, "decoder"));
  for (const char* g : {"adv_cls_person_on_wid", "adv_cls_word_on_pid",
                        "cls_domain", "cls_person", "cls_word_shared"})
    CHECK(group_unchanged(t.model(), before, g));

  for (const char* name : {"genD/d", "genG/gan_audio", "genG/gan_visual",
                           "genG/l1_audio", "genG/l1_visual", "genG/total"})
    CHECK_MESSAGE(has_loss(rep, name), name);
}

TEST_CASE("generator step honors frozen encoders and a disabled "
          "discriminator") {
  TrainConfig cfg = tiny_train();
  cfg.partition_check_every = 1;
  cfg.freeze_encoders_in_gen = true;
  Trainer t(temp_dir("gen_frozen"), tiny_net(), cfg, train_manifest());
  const auto batches = first_batches();

  auto before = snapshot_all(t.model());
  StepReport rep = t.gen_step(batches[0]);
  CHECK(rep.updated_b == std::vector<std::string>{"decoder"});
  for (const char* g : {"enc_aud_wid", "enc_pid", "enc_vid_wid"})
    CHECK(group_unchanged(t.model(), before, g));

  TrainConfig no_gan = tiny_train();
  no_gan.partition_check_every = 1;
  no_gan.enable_gan = false;
  Trainer t2(temp_dir("gen_nogan"), tiny_net(), no_gan, train_manifest());
  before = snapshot_all(t2.model());
  rep = t2.gen_step(batches[0]);
  CHECK(rep.updated_a.empty());
  CHECK(group_unchanged(t2.model(), before, "disc_seq"));
  CHECK_FALSE(has_loss(rep, "genD/d"));
  CHECK_FALSE(has_loss(rep, "genG/gan_audio"));

  // Without the adversarial term the objective is the weighted L1 pair.
  double l1a = 0, l1v = 0, total = 0;
  for (const auto& [n, v] : rep.losses) {
    if (n == "genG/l1_audio") l1a = v;
    if (n == "genG/l1_visual") l1v = v;
    if (n == "genG/total") total = v;
  }
  CHECK(total ==
        doctest::Approx(no_gan.weights.alpha * (l1a + l1v)).epsilon(1e-5));
}

TEST_CASE("ablation switches select which groups train") {
  TrainConfig cfg = tiny_train();
  cfg.enable_adversarial = false;
  cfg.enable_domain = false;
  Trainer t(temp_dir("ablate"), tiny_net(), cfg, train_manifest());
  CHECK(t.embed_groups_a().empty());

  const auto batches = first_batches();
  const auto before = snapshot_all(t.model());
  const StepReport rep = t.embed_step(batches[0]);
  CHECK(rep.updated_a.empty());
  for (const char* g :
       {"adv_cls_person_on_wid", "adv_cls_word_on_pid", "cls_domain"})
    CHECK(group_unchanged(t.model(), before, g));
  CHECK_FALSE(has_loss(rep, "embedA/adv_word"));
  CHECK_FALSE(has_loss(rep, "embedB/uniform_word"));
  CHECK_FALSE(has_loss(rep, "embedB/domain_confusion"));
  CHECK(has_loss(rep, "embedB/word_visual"));
  CHECK(has_loss(rep, "embedB/contrastive"));

  TrainConfig frozen = tiny_train();
  frozen.freeze_encoders_in_gen = true;
  Trainer t2(temp_dir("ablate2"), tiny_net(), frozen, train_manifest());
  CHECK(t2.gen_groups_b() == std::vector<std::string>{"decoder"});
}

TEST_CASE("training run produces logs, reports and checkpoints") {
  const auto dir = temp_dir("run");
  Trainer t(dir, tiny_net(), tiny_train(), train_manifest());
  const fs::path last = t.run();

  CHECK(last == dir / "checkpoints" / "epoch_2");
  CHECK(t.state().epoch == 2);
  CHECK(t.state().global_step == 6);  // 12 samples / batch 4 = 3 steps/epoch
  CHECK(t.state().phase == "done");

  const std::string csv = read_text(dir / "logs" / "losses.csv");
  CHECK(csv.rfind("step,loss,value\n", 0) == 0);
  CHECK(csv.find("\n0,embedA/adv_word,") != std::string::npos);
  CHECK(csv.find("\n5,genG/total,") != std::string::npos);
  // Phase-2 steps keep the embedding supervision running alongside.
  CHECK(csv.find("\n3,embedB/contrastive,") != std::string::npos);

  const auto rep1 =
      nlohmann::json::parse(read_text(dir / "reports" / "epoch_1.json"));
  CHECK(rep1.at("phase") == "embed");
  CHECK(rep1.at("steps") == 3);
  CHECK(rep1.at("mean_losses").contains("embedB/contrastive"));
  CHECK(rep1.at("config_hash") == nets::config_hash(tiny_net()));
  const auto rep2 =
      nlohmann::json::parse(read_text(dir / "reports" / "epoch_2.json"));
  CHECK(rep2.at("phase") == "gen");
  CHECK(rep2.at("mean_losses").contains("genD/d"));

  for (const char* f : {"trainstate.json", "optim.bin"})
    CHECK(fs::exists(dir / "checkpoints" / "epoch_1" / f));

  // The final checkpoint restores into a fresh model bit for bit.
  const auto bundle = nets::load_checkpoint(last, tiny_net());
  DavsModel<float> fresh(tiny_net(), 123);
  nets::assign_params(bundle, fresh.params);
  for (const auto& g : nets::subnetwork_groups())
    CHECK(fresh.params.snapshot(g) == t.model().params.snapshot(g));
}

TEST_CASE("a resumed run reproduces the uninterrupted run bit for bit") {
  const auto dir_a = temp_dir("full");
  const auto dir_b = temp_dir("split");

  Trainer a(dir_a, tiny_net(), tiny_train(), train_manifest());
  a.run();

  {
    Trainer b(dir_b, tiny_net(), tiny_train(), train_manifest());
    b.run(1);
    CHECK(b.state().epoch == 1);
  }
  auto b2 = Trainer::resume(dir_b, train_manifest());
  CHECK(b2->state().epoch == 1);
  CHECK(b2->state().phase == "embed");
  b2->run();
  CHECK(b2->state().phase == "done");

  CHECK(read_text(dir_a / "logs" / "losses.csv") ==
        read_text(dir_b / "logs" / "losses.csv"));

  // Every artifact of the final checkpoint matches, including optimizer
  // moments and the serialized model arrays.
  const fs::path ck_a = dir_a / "checkpoints" / "epoch_2";
  const fs::path ck_b = dir_b / "checkpoints" / "epoch_2";
  long compared = 0;
  for (const auto& e : fs::directory_iterator(ck_a)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename();
    CHECK_MESSAGE(core::read_file_bytes(e.path()) ==
                      core::read_file_bytes(ck_b / name),
                  name.string());
    ++compared;
  }
  CHECK(compared >= 3);

  CHECK_THROWS_AS(Trainer::resume(temp_dir("no_ck"), train_manifest()),
                  StorageError);  // no config.json at all
  const auto unstarted = temp_dir("unstarted");
  Trainer(unstarted, tiny_net(), tiny_train(), train_manifest());
  CHECK_THROWS_AS(Trainer::resume(unstarted, train_manifest()),
                  FormatError);  // config but no complete checkpoint
}

TEST_CASE("divergence raises a typed error and writes a crash checkpoint") {
  const auto dir = temp_dir("diverge");
  Trainer t(dir, tiny_net(), tiny_train(), train_manifest());
  auto& weights = t.model().params.group("enc_pid")[0].second;
  weights.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();

  bool thrown = false;
  try {
    t.run();
  } catch (const DivergenceError& e) {
    thrown = true;
    CHECK(std::string(e.loss_name()).rfind("embed", 0) == 0);
    CHECK(e.step() == 0);
  }
  CHECK(thrown);
  CHECK(fs::exists(dir / "checkpoints" / "crash" / "trainstate.json"));
}
