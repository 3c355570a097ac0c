// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "davs/core/io_util.hpp"
#include "davs/nets/checkpoint.hpp"

namespace davs::train {

namespace fs = std::filesystem;
using core::NoGradGuard;
using core::Tensor;
using core::Var;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (batch_size < 1)
    throw ConfigError("train: batch_size must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("train: learning_rate must be finite and positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) ||
      !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("train: adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0))
    throw ConfigError("train: adam eps must be positive");
  if (epochs_embed < 0 || epochs_gen < 0)
    throw ConfigError("train: epoch counts must be non-negative");
  if (epochs_embed + epochs_gen < 1)
    throw ConfigError("train: schedule needs at least one epoch");
  if (identity_guidance != "random_frame" && identity_guidance != "first_frame")
    throw ConfigError("train: identity_guidance must be 'random_frame' or "
                      "'first_frame', got '" + identity_guidance + "'");
  if (cls_steps_per_enc_step < 1)
    throw ConfigError("train: cls_steps_per_enc_step must be at least 1");
  if (partition_check_every < 0)
    throw ConfigError("train: partition_check_every must be non-negative");
  weights.validate();
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["adam"] = {{"beta1", cfg.adam.beta1},
               {"beta2", cfg.adam.beta2},
               {"eps", cfg.adam.eps}};
  j["epochs_embed"] = cfg.epochs_embed;
  j["epochs_gen"] = cfg.epochs_gen;
  j["weights"] = {{"alpha", cfg.weights.alpha},
                  {"lambda_contrastive", cfg.weights.lambda_contrastive},
                  {"lambda_shared_word", cfg.weights.lambda_shared_word},
                  {"lambda_domain", cfg.weights.lambda_domain},
                  {"lambda_person", cfg.weights.lambda_person},
                  {"lambda_adv_uniform", cfg.weights.lambda_adv_uniform}};
  j["seed"] = cfg.seed;
  j["identity_guidance"] = cfg.identity_guidance;
  j["keep_embed_supervision_in_gen"] = cfg.keep_embed_supervision_in_gen;
  j["freeze_encoders_in_gen"] = cfg.freeze_encoders_in_gen;
  j["cls_steps_per_enc_step"] = cfg.cls_steps_per_enc_step;
  j["partition_check_every"] = cfg.partition_check_every;
  j["enable_contrastive"] = cfg.enable_contrastive;
  j["enable_shared_word"] = cfg.enable_shared_word;
  j["enable_person"] = cfg.enable_person;
  j["enable_adversarial"] = cfg.enable_adversarial;
  j["enable_domain"] = cfg.enable_domain;
  j["enable_gan"] = cfg.enable_gan;
  return j;
}

namespace {

void require_keys(const nlohmann::json& j, const std::set<std::string>& keys,
                  const char* what) {
  if (!j.is_object())
    throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k))
      throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
  for (const auto& k : keys)
    if (!j.contains(k))
      throw ConfigError(std::string(what) + ": missing key '" + k + "'");
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_keys(j,
               {"batch_size", "learning_rate", "adam", "epochs_embed",
                "epochs_gen", "weights", "seed", "identity_guidance",
                "keep_embed_supervision_in_gen", "freeze_encoders_in_gen",
                "cls_steps_per_enc_step", "partition_check_every",
                "enable_contrastive", "enable_shared_word", "enable_person",
                "enable_adversarial", "enable_domain", "enable_gan"},
               "train config");
  require_keys(j.at("adam"), {"beta1", "beta2", "eps"}, "train config adam");
  require_keys(j.at("weights"),
               {"alpha", "lambda_contrastive", "lambda_shared_word",
                "lambda_domain", "lambda_person", "lambda_adv_uniform"},
               "train config weights");
  TrainConfig cfg;
  try {
    cfg.batch_size = j.at("batch_size").get<long>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.adam.beta1 = j.at("adam").at("beta1").get<double>();
    cfg.adam.beta2 = j.at("adam").at("beta2").get<double>();
    cfg.adam.eps = j.at("adam").at("eps").get<double>();
    cfg.epochs_embed = j.at("epochs_embed").get<long>();
    cfg.epochs_gen = j.at("epochs_gen").get<long>();
    const auto& w = j.at("weights");
    cfg.weights.alpha = w.at("alpha").get<double>();
    cfg.weights.lambda_contrastive = w.at("lambda_contrastive").get<double>();
    cfg.weights.lambda_shared_word = w.at("lambda_shared_word").get<double>();
    cfg.weights.lambda_domain = w.at("lambda_domain").get<double>();
    cfg.weights.lambda_person = w.at("lambda_person").get<double>();
    cfg.weights.lambda_adv_uniform = w.at("lambda_adv_uniform").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.identity_guidance = j.at("identity_guidance").get<std::string>();
    cfg.keep_embed_supervision_in_gen =
        j.at("keep_embed_supervision_in_gen").get<bool>();
    cfg.freeze_encoders_in_gen = j.at("freeze_encoders_in_gen").get<bool>();
    cfg.cls_steps_per_enc_step = j.at("cls_steps_per_enc_step").get<long>();
    cfg.partition_check_every = j.at("partition_check_every").get<long>();
    cfg.enable_contrastive = j.at("enable_contrastive").get<bool>();
    cfg.enable_shared_word = j.at("enable_shared_word").get<bool>();
    cfg.enable_person = j.at("enable_person").get<bool>();
    cfg.enable_adversarial = j.at("enable_adversarial").get<bool>();
    cfg.enable_domain = j.at("enable_domain").get<bool>();
    cfg.enable_gan = j.at("enable_gan").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(core::ParamStore<float>& params, double lr, const AdamConfig& cfg)
    : params_(&params), lr_(lr), cfg_(cfg) {
  for (const auto& gname : params.group_names()) {
    GroupState st;
    for (const auto& [name, var] : params.group(gname)) {
      st.m.emplace_back(var.shape());
      st.v.emplace_back(var.shape());
    }
    state_.emplace(gname, std::move(st));
  }
}

void Adam::step(const std::vector<std::string>& groups) {
  DAVS_CHECK(params_ != nullptr, "Adam used before initialization");
  for (const auto& gname : groups) {
    auto it = state_.find(gname);
    DAVS_CHECK(it != state_.end(), "Adam: unknown group " + gname);
    GroupState& st = it->second;
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(st.t));
    auto& group = params_->group(gname);
    for (size_t p = 0; p < group.size(); ++p) {
      auto& var = group[p].second;
      const Tensor<float> grad = var.grad();  // zeros when no buffer exists
      float* m = st.m[p].data();
      float* v = st.v[p].data();
      float* w = var.mutable_value().data();
      const float* g = grad.data();
      const float b1 = float(cfg_.beta1), b2 = float(cfg_.beta2);
      const long n = st.m[p].numel();
      for (long i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        const double mh = double(m[i]) / bc1;
        const double vh = double(v[i]) / bc2;
        w[i] -= float(lr_ * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }
}

std::vector<std::uint8_t> Adam::serialize() const {
  DAVS_CHECK(params_ != nullptr, "Adam used before initialization");
  std::vector<std::uint8_t> out;
  const char magic[8] = {'D', 'A', 'V', 'S', 'O', 'P', 'T', '1'};
  out.insert(out.end(), magic, magic + 8);
  core::append_le<std::uint64_t>(out, state_.size());
  for (const auto& [gname, st] : state_) {  // std::map: sorted, canonical
    core::append_le<std::uint32_t>(out, std::uint32_t(gname.size()));
    out.insert(out.end(), gname.begin(), gname.end());
    core::append_le<std::int64_t>(out, st.t);
    core::append_le<std::uint64_t>(out, st.m.size());
    for (size_t p = 0; p < st.m.size(); ++p) {
      core::append_le<std::uint64_t>(out, std::uint64_t(st.m[p].numel()));
      const auto* mb = reinterpret_cast<const std::uint8_t*>(st.m[p].data());
      out.insert(out.end(), mb, mb + st.m[p].numel() * sizeof(float));
      const auto* vb = reinterpret_cast<const std::uint8_t*>(st.v[p].data());
      out.insert(out.end(), vb, vb + st.v[p].numel() * sizeof(float));
    }
  }
  return out;
}

void Adam::deserialize(const std::vector<std::uint8_t>& bytes) {
  DAVS_CHECK(params_ != nullptr, "Adam used before initialization");
  core::ByteReader r(bytes, "optimizer state");
  if (r.take_string(8) != "DAVSOPT1")
    throw FormatError("optimizer state: bad magic");
  const auto n_groups = r.take<std::uint64_t>();
  if (n_groups != state_.size())
    throw FormatError("optimizer state: expected " +
                      std::to_string(state_.size()) + " groups, found " +
                      std::to_string(n_groups));
  for (auto& [gname, st] : state_) {
    const auto len = r.take<std::uint32_t>();
    const std::string name = r.take_string(len);
    if (name != gname)
      throw FormatError("optimizer state: group '" + name +
                        "' does not match expected '" + gname + "'");
    st.t = r.take<std::int64_t>();
    const auto n_params = r.take<std::uint64_t>();
    if (n_params != st.m.size())
      throw FormatError("optimizer state: group '" + gname +
                        "' parameter count mismatch");
    for (size_t p = 0; p < st.m.size(); ++p) {
      const auto numel = r.take<std::uint64_t>();
      if (numel != std::uint64_t(st.m[p].numel()))
        throw FormatError("optimizer state: array size mismatch in group '" +
                          gname + "'");
      r.take_bytes(st.m[p].data(), numel * sizeof(float));
      r.take_bytes(st.v[p].data(), numel * sizeof(float));
    }
  }
  if (!r.done()) throw FormatError("optimizer state: trailing bytes");
}

// ---------------------------------------------------------------------------
// Trainer construction

namespace {

void check_manifest_compatible(const nets::NetworkConfig& net,
                               const avdata::Manifest& m) {
  const auto& toy = m.toy;
  if (net.n_words != toy.n_words || net.n_persons != toy.n_persons ||
      net.frame_size != toy.frame_size ||
      net.frames_per_clip != toy.frames_per_clip)
    throw ContractError(
        "trainer: network config (words/persons/frame_size/frames) does not "
        "match the dataset manifest");
}

std::string state_to_json(const TrainState& st) {
  nlohmann::json j;
  j["epoch"] = st.epoch;
  j["global_step"] = st.global_step;
  j["phase"] = st.phase;
  return j.dump(2) + "\n";
}

TrainState state_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    TrainState st;
    st.epoch = j.at("epoch").get<long>();
    st.global_step = j.at("global_step").get<long>();
    st.phase = j.at("phase").get<std::string>();
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trainstate.json: ") + e.what());
  }
}

}  // namespace

Trainer::Trainer(const fs::path& run_dir, const nets::NetworkConfig& net_cfg,
                 const TrainConfig& cfg, avdata::Manifest train_manifest,
                 const nlohmann::json& extra_sections)
    : run_dir_(run_dir),
      net_cfg_(net_cfg),
      cfg_(cfg),
      manifest_(std::move(train_manifest)),
      master_rng_(cfg.seed) {
  net_cfg_.validate();
  cfg_.validate();
  check_manifest_compatible(net_cfg_, manifest_);
  mfcc_cfg_.sample_rate = manifest_.toy.audio_sample_rate;
  mfcc_cfg_.validate();
  model_ = std::make_unique<nets::DavsModel<float>>(net_cfg_, cfg_.seed);
  optim_ = Adam(model_->params, cfg_.learning_rate, cfg_.adam);

  // The weights live in their own top-level section so the run config uses
  // the same layout as operator-facing config files.
  nlohmann::json j;
  j["network"] = nets::network_config_to_json(net_cfg_);
  nlohmann::json tj = train_config_to_json(cfg_);
  j["weights"] = tj.at("weights");
  tj.erase("weights");
  j["train"] = tj;
  for (const auto& [key, value] : extra_sections.items()) {
    DAVS_CHECK(!j.contains(key),
               "extra config section collides with '" + key + "'");
    j[key] = value;
  }
  core::write_file_atomic(run_dir_ / "config.json", j.dump(2) + "\n");
}

Trainer::Trainer(const fs::path& run_dir, avdata::Manifest manifest, bool)
    : run_dir_(run_dir), manifest_(std::move(manifest)), master_rng_(0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(core::read_file_text(run_dir_ / "config.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config.json: ") + e.what());
  }
  if (!j.contains("network") || !j.contains("train"))
    throw FormatError("config.json: missing 'network' or 'train' section");
  net_cfg_ = nets::network_config_from_json(j.at("network"));
  nlohmann::json tj = j.at("train");
  if (!tj.contains("weights")) {
    if (!j.contains("weights"))
      throw FormatError("config.json: missing 'weights' section");
    tj["weights"] = j.at("weights");
  }
  cfg_ = train_config_from_json(tj);
  check_manifest_compatible(net_cfg_, manifest_);
  master_rng_ = core::Rng(cfg_.seed);
  mfcc_cfg_.sample_rate = manifest_.toy.audio_sample_rate;
  mfcc_cfg_.validate();
  model_ = std::make_unique<nets::DavsModel<float>>(net_cfg_, cfg_.seed);
  optim_ = Adam(model_->params, cfg_.learning_rate, cfg_.adam);
}

std::unique_ptr<Trainer> Trainer::resume(const fs::path& run_dir,
                                         avdata::Manifest train_manifest) {
  auto t = std::unique_ptr<Trainer>(
      new Trainer(run_dir, std::move(train_manifest), true));
  // Newest epoch directory whose trainstate.json (written last) exists.
  long best = -1;
  const fs::path ckroot = run_dir / "checkpoints";
  if (fs::exists(ckroot))
    for (const auto& e : fs::directory_iterator(ckroot)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("epoch_", 0) != 0) continue;
      if (!fs::exists(e.path() / "trainstate.json")) continue;
      try {
        best = std::max(best, std::stol(name.substr(6)));
      } catch (...) {
        continue;
      }
    }
  if (best < 0)
    throw FormatError("resume: no complete epoch checkpoint under " +
                      ckroot.string());
  t->load_checkpoint_dir(ckroot / ("epoch_" + std::to_string(best)));
  return t;
}

// ---------------------------------------------------------------------------
// Batch preparation

const Trainer::Prepared& Trainer::sample_tensors(long index) {
  auto it = sample_cache_.find(index);
  if (it != sample_cache_.end()) return it->second;

  const auto sample = avdata::load_record(manifest_, index);
  const long t = net_cfg_.frames_per_clip;
  Prepared p;
  p.n = 1;
  p.visual = nets::nchw_from_hwc<float>(sample.frames);
  if (p.visual.dim(0) != t)
    throw ContractError("trainer: sample '" + sample.meta.sample_id +
                        "' has " + std::to_string(p.visual.dim(0)) +
                        " frames, expected " + std::to_string(t));
  const auto seq = audiofeat::mfcc(sample.audio, mfcc_cfg_);
  p.audio = Tensor<float>({t, 1, 12, 20});
  for (long f = 0; f < t; ++f) {
    const auto block = audiofeat::align_block(seq, f, manifest_.toy.fps);
    float* dst = p.audio.data() + f * 12 * 20;
    for (long i = 0; i < 12 * 20; ++i) dst[i] = float(block[i]);
  }
  p.word_labels = {sample.meta.word_id};
  p.person_labels.assign(size_t(t), sample.meta.person_id);
  return sample_cache_.emplace(index, std::move(p)).first->second;
}

Trainer::Prepared Trainer::prepare(const avdata::Batch& batch) {
  const long n = long(batch.indices.size());
  DAVS_CHECK(n >= 1, "trainer: empty batch");
  const long t = net_cfg_.frames_per_clip;
  const long h = net_cfg_.frame_size;
  Prepared out;
  out.n = n;
  out.visual = Tensor<float>({n * t, 3, h, h});
  out.audio = Tensor<float>({n * t, 1, 12, 20});
  out.word_labels.resize(size_t(n));
  out.person_labels.resize(size_t(n * t));
  const long vstride = 3 * h * h, astride = 12 * 20;
  for (long i = 0; i < n; ++i) {
    const Prepared& s = sample_tensors(batch.indices[size_t(i)]);
    std::copy_n(s.visual.data(), t * vstride,
                out.visual.data() + i * t * vstride);
    std::copy_n(s.audio.data(), t * astride,
                out.audio.data() + i * t * astride);
    out.word_labels[size_t(i)] = s.word_labels[0];
    std::copy_n(s.person_labels.begin(), size_t(t),
                out.person_labels.begin() + i * t);
  }
  DAVS_CHECK(batch.pairing.shape() == core::Shape({n, n}),
             "trainer: batch pairing matrix must be (N,N)");
  out.pairing = batch.pairing;
  return out;
}

// ---------------------------------------------------------------------------
// Step helpers

void Trainer::check_finite(const char* name, double value) const {
  if (!std::isfinite(value))
    throw DivergenceError(name, state_.global_step,
                          std::string("training diverged: loss '") + name +
                              "' is non-finite at step " +
                              std::to_string(state_.global_step));
}

std::vector<std::vector<float>> Trainer::snapshot_all() const {
  std::vector<std::vector<float>> out;
  for (const auto& g : nets::subnetwork_groups())
    out.push_back(model_->params.snapshot(g));
  return out;
}

void Trainer::maybe_check_partition(
    const std::vector<std::string>& allowed,
    const std::vector<std::vector<float>>& before, const char* what) const {
  const auto groups = nets::subnetwork_groups();
  for (size_t i = 0; i < groups.size(); ++i) {
    if (std::find(allowed.begin(), allowed.end(), groups[i]) != allowed.end())
      continue;
    const auto now = model_->params.snapshot(groups[i]);
    if (now.size() != before[i].size() ||
        std::memcmp(now.data(), before[i].data(),
                    now.size() * sizeof(float)) != 0)
      throw ContractError(std::string(what) + " modified frozen group '" +
                          groups[i] + "'");
  }
}

std::vector<std::string> Trainer::embed_groups_a() const {
  std::vector<std::string> g;
  if (cfg_.enable_adversarial) {
    g.push_back("adv_cls_person_on_wid");
    g.push_back("adv_cls_word_on_pid");
  }
  if (cfg_.enable_domain) g.push_back("cls_domain");
  return g;
}

std::vector<std::string> Trainer::embed_groups_b() const {
  std::vector<std::string> g;
  if (cfg_.enable_person) g.push_back("cls_person");
  if (cfg_.enable_shared_word) g.push_back("cls_word_shared");
  g.push_back("enc_aud_wid");
  g.push_back("enc_pid");
  g.push_back("enc_vid_wid");
  return g;
}

std::vector<std::string> Trainer::gen_groups_a() const {
  if (cfg_.enable_gan) return {"disc_seq"};
  return {};
}

std::vector<std::string> Trainer::gen_groups_b() const {
  std::vector<std::string> g = {"decoder"};
  if (!cfg_.freeze_encoders_in_gen) {
    g.push_back("enc_aud_wid");
    g.push_back("enc_pid");
    g.push_back("enc_vid_wid");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Embedding-phase step

StepReport Trainer::embed_step(const avdata::Batch& batch) {
  const Prepared prep = prepare(batch);
  const long n = prep.n, t = net_cfg_.frames_per_clip;
  const long ld = net_cfg_.latent_dim;
  StepReport rep;
  rep.step = state_.global_step;
  rep.updated_a = embed_groups_a();
  rep.updated_b = embed_groups_b();

  const bool checking =
      cfg_.partition_check_every > 0 &&
      state_.global_step % cfg_.partition_check_every == 0;

  const std::vector<long> domain_visual(size_t(n * t), 0);
  const std::vector<long> domain_audio(size_t(n * t), 1);
  auto domain_fn = [&](const Var<float>& f) {
    return model_->domain_logits(f);
  };

  // --- Sub-step A: train the adversarial classifiers on frozen features. ---
  if (!rep.updated_a.empty()) {
    std::vector<std::pair<std::string, double>> a_losses;
    for (long it = 0; it < cfg_.cls_steps_per_enc_step; ++it) {
      // Features as plain tensors: the encoders contribute no graph at all.
      Tensor<float> fp_flat, fwv, fwa;
      {
        NoGradGuard ng;
        fp_flat = core::reshape(model_->encode_pid(Var<float>(prep.visual)),
                                {n, t * ld})
                      .value();
        fwv = model_->encode_vid_wid(Var<float>(prep.visual)).value();
        fwa = model_->encode_aud_wid(Var<float>(prep.audio)).value();
      }
      auto before = checking ? snapshot_all()
                             : std::vector<std::vector<float>>{};
      model_->params.zero_grad();
      a_losses.clear();
      Var<float> total;
      bool any = false;
      auto add_loss = [&](const char* name, const Var<float>& l) {
        const double v = double(l.item());
        check_finite(name, v);
        a_losses.emplace_back(name, v);
        total = any ? core::add(total, l) : l;
        any = true;
      };
      if (cfg_.enable_adversarial) {
        add_loss("embedA/adv_word",
                 losses::adv_cls_ce_word_on_pid(
                     [&](const Var<float>& f) {
                       return model_->adv_word_logits_on_pid(f);
                     },
                     Var<float>(fp_flat), prep.word_labels));
        add_loss("embedA/adv_person",
                 losses::adv_cls_ce_person_on_wid(
                     [&](const Var<float>& f) {
                       return model_->adv_person_logits_on_wid(f);
                     },
                     Var<float>(fwv), prep.person_labels));
      }
      if (cfg_.enable_domain) {
        auto pv = losses::domain_adv_pair(domain_fn, Var<float>(fwv),
                                          domain_visual);
        auto pa = losses::domain_adv_pair(domain_fn, Var<float>(fwa),
                                          domain_audio);
        add_loss("embedA/domain",
                 core::scale(core::add(pv.first, pa.first), 0.5f));
      }
      total.backward();
      optim_.step(rep.updated_a);
      if (checking) maybe_check_partition(rep.updated_a, before, "embed sub-step A");
    }
    rep.losses.insert(rep.losses.end(), a_losses.begin(), a_losses.end());
  }

  // --- Sub-step B: train encoders and shared classifiers, adversaries
  // frozen. The guards must span backward(), where gradient gating happens.
  {
    auto before = checking ? snapshot_all()
                           : std::vector<std::vector<float>>{};
    model_->params.zero_grad();
    core::FreezeGuard<float> fz_w(model_->params, "adv_cls_word_on_pid");
    core::FreezeGuard<float> fz_p(model_->params, "adv_cls_person_on_wid");
    core::FreezeGuard<float> fz_d(model_->params, "cls_domain");

    Var<float> visual_in(prep.visual), audio_in(prep.audio);
    auto f_p = model_->encode_pid(visual_in);        // (N*T, latent)
    auto f_wv = model_->encode_vid_wid(visual_in);   // (N*T, latent)
    auto f_wa = model_->encode_aud_wid(audio_in);    // (N*T, latent)
    auto seq_p = core::reshape(f_p, {n, t * ld});
    auto seq_wv = core::reshape(f_wv, {n, t * ld});
    auto seq_wa = core::reshape(f_wa, {n, t * ld});

    Var<float> total;
    bool any = false;
    auto add_loss = [&](const char* name, const Var<float>& l,
                        double lambda) {
      const double v = double(l.item());
      check_finite(name, v);
      rep.losses.emplace_back(name, v);
      if (lambda == 0.0) return;
      const Var<float> weighted =
          lambda == 1.0 ? l : core::scale(l, float(lambda));
      total = any ? core::add(total, weighted) : weighted;
      any = true;
    };

    if (cfg_.enable_shared_word) {
      add_loss("embedB/word_visual",
               losses::word_ce(model_->word_logits(seq_wv), prep.word_labels),
               cfg_.weights.lambda_shared_word);
      add_loss("embedB/word_audio",
               losses::word_ce(model_->word_logits(seq_wa), prep.word_labels),
               cfg_.weights.lambda_shared_word);
    }
    if (cfg_.enable_contrastive) {
      Tensor<float> labels = prep.pairing;
      add_loss("embedB/contrastive",
               losses::contrastive_loss(core::rows_l2_normalize(seq_wv),
                                        core::rows_l2_normalize(seq_wa),
                                        labels),
               cfg_.weights.lambda_contrastive);
    }
    if (cfg_.enable_person) {
      add_loss("embedB/person",
               losses::person_ce(model_->person_logits(f_p),
                                 prep.person_labels),
               cfg_.weights.lambda_person);
    }
    if (cfg_.enable_adversarial) {
      add_loss("embedB/uniform_word",
               losses::adv_enc_uniform_word(core::softmax_rows(
                   model_->adv_word_logits_on_pid(seq_p))),
               cfg_.weights.lambda_adv_uniform);
      add_loss("embedB/uniform_person",
               losses::adv_enc_uniform_person(core::softmax_rows(
                   model_->adv_person_logits_on_wid(f_wv))),
               cfg_.weights.lambda_adv_uniform);
    }
    if (cfg_.enable_domain) {
      auto pv = losses::domain_adv_pair(domain_fn, f_wv, domain_visual);
      auto pa = losses::domain_adv_pair(domain_fn, f_wa, domain_audio);
      add_loss("embedB/domain_confusion",
               core::scale(core::add(pv.second, pa.second), 0.5f),
               cfg_.weights.lambda_domain);
    }

    if (any) {
      total.backward();
      optim_.step(rep.updated_b);
    }
    if (checking)
      maybe_check_partition(rep.updated_b, before, "embed sub-step B");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Generator-phase step

StepReport Trainer::gen_step(const avdata::Batch& batch) {
  const Prepared prep = prepare(batch);
  const long n = prep.n, t = net_cfg_.frames_per_clip;
  const long h = net_cfg_.frame_size;
  StepReport rep;
  rep.step = state_.global_step;
  rep.updated_a = gen_groups_a();
  rep.updated_b = gen_groups_b();

  const bool checking =
      cfg_.partition_check_every > 0 &&
      state_.global_step % cfg_.partition_check_every == 0;

  // Identity guidance: one frame index per sample, drawn from the per-epoch
  // stream so resumed runs replay the same choices.
  std::vector<long> ident_rows(static_cast<size_t>(n), 0);
  std::vector<long> repeat_rows(static_cast<size_t>(n * t), 0);
  for (long i = 0; i < n; ++i) {
    const long k = cfg_.identity_guidance == "first_frame"
                       ? 0
                       : long(guidance_rng_.uniform_int(std::uint64_t(t)));
    ident_rows[size_t(i)] = i * t + k;
    for (long f = 0; f < t; ++f) repeat_rows[size_t(i * t + f)] = i;
  }
  Tensor<float> ident({n, 3, h, h});
  const long vstride = 3 * h * h;
  for (long i = 0; i < n; ++i)
    std::copy_n(prep.visual.data() + ident_rows[size_t(i)] * vstride, vstride,
                ident.data() + i * vstride);

  Tensor<float> real_scores;  // kept for the generator's GAN term

  // --- Discriminator sub-step on real vs detached fakes. ---
  if (cfg_.enable_gan) {
    Tensor<float> fake_audio, fake_visual;
    {
      NoGradGuard ng;
      auto f_pk = model_->encode_pid(Var<float>(ident));
      auto f_rep = core::gather_rows(f_pk, repeat_rows);
      fake_audio =
          model_->decode(f_rep, model_->encode_aud_wid(Var<float>(prep.audio)))
              .value();
      fake_visual =
          model_
              ->decode(f_rep, model_->encode_vid_wid(Var<float>(prep.visual)))
              .value();
    }
    auto before = checking ? snapshot_all()
                           : std::vector<std::vector<float>>{};
    model_->params.zero_grad();
    auto s_real = model_->disc_seq_score(Var<float>(prep.visual), n);
    auto s_fa = model_->disc_seq_score(Var<float>(fake_audio), n);
    auto s_fv = model_->disc_seq_score(Var<float>(fake_visual), n);
    auto gl_a = losses::gan_losses(s_real, s_fa);
    auto gl_v = losses::gan_losses(s_real, s_fv);
    auto d_loss = core::scale(core::add(gl_a.d_loss, gl_v.d_loss), 0.5f);
    const double dv = double(d_loss.item());
    check_finite("genD/d", dv);
    rep.losses.emplace_back("genD/d", dv);
    d_loss.backward();
    optim_.step(rep.updated_a);
    if (checking)
      maybe_check_partition(rep.updated_a, before, "gen discriminator sub-step");
    real_scores = s_real.value();
  }

  // --- Generator sub-step: GAN + L1 over both content paths. ---
  {
    auto before = checking ? snapshot_all()
                           : std::vector<std::vector<float>>{};
    model_->params.zero_grad();
    core::FreezeGuard<float> fz_disc(model_->params, "disc_seq");
    std::vector<std::unique_ptr<core::FreezeGuard<float>>> fz_enc;
    if (cfg_.freeze_encoders_in_gen)
      for (const char* g : {"enc_aud_wid", "enc_pid", "enc_vid_wid"})
        fz_enc.push_back(
            std::make_unique<core::FreezeGuard<float>>(model_->params, g));

    Var<float> visual_in(prep.visual), audio_in(prep.audio);
    auto f_pk = model_->encode_pid(Var<float>(ident));
    auto f_rep = core::gather_rows(f_pk, repeat_rows);
    auto fake_a = model_->decode(f_rep, model_->encode_aud_wid(audio_in));
    auto fake_v = model_->decode(f_rep, model_->encode_vid_wid(visual_in));
    auto l1_a = losses::l1_recon(fake_a, visual_in);
    auto l1_v = losses::l1_recon(fake_v, visual_in);

    Var<float> total;
    if (cfg_.enable_gan) {
      Var<float> s_real(real_scores);
      auto g_a = losses::gan_losses(s_real, model_->disc_seq_score(fake_a, n))
                     .g_loss;
      auto g_v = losses::gan_losses(s_real, model_->disc_seq_score(fake_v, n))
                     .g_loss;
      total = core::add(losses::total_recon(g_a, l1_a, cfg_.weights),
                        losses::total_recon(g_v, l1_v, cfg_.weights));
      for (auto& [name, var] :
           std::initializer_list<std::pair<const char*, Var<float>*>>{
               {"genG/gan_audio", &g_a}, {"genG/gan_visual", &g_v}}) {
        const double v = double(var->item());
        check_finite(name, v);
        rep.losses.emplace_back(name, v);
      }
    } else {
      total = core::scale(core::add(l1_a, l1_v), float(cfg_.weights.alpha));
    }
    for (auto& [name, var] :
         std::initializer_list<std::pair<const char*, Var<float>*>>{
             {"genG/l1_audio", &l1_a}, {"genG/l1_visual", &l1_v}}) {
      const double v = double(var->item());
      check_finite(name, v);
      rep.losses.emplace_back(name, v);
    }
    const double tv = double(total.item());
    check_finite("genG/total", tv);
    rep.losses.emplace_back("genG/total", tv);

    total.backward();
    optim_.step(rep.updated_b);
    if (checking)
      maybe_check_partition(rep.updated_b, before, "gen generator sub-step");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Run loop and artifacts

void Trainer::append_csv(const StepReport& rep) {
  const fs::path path = run_dir_ / "logs" / "losses.csv";
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw StorageError("cannot append to " + path.string());
  if (fresh) out << "step,loss,value\n";
  char buf[64];
  for (const auto& [name, value] : rep.losses) {
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out << rep.step << ',' << name << ',' << buf << '\n';
  }
  if (!out) throw StorageError("write failed: " + path.string());
}

void Trainer::write_epoch_artifacts(long epoch,
                                    const std::vector<StepReport>& reports,
                                    double seconds) {
  std::map<std::string, std::pair<double, long>> sums;
  for (const auto& r : reports)
    for (const auto& [name, value] : r.losses) {
      auto& s = sums[name];
      s.first += value;
      s.second += 1;
    }
  nlohmann::json means = nlohmann::json::object();
  for (const auto& [name, s] : sums)
    means[name] = s.first / double(std::max<long>(1, s.second));
  nlohmann::json j;
  j["epoch"] = epoch;
  j["phase"] = state_.phase;
  j["steps"] = reports.size();
  j["seconds"] = seconds;
  j["mean_losses"] = means;
  j["config_hash"] = nets::config_hash(net_cfg_);
  core::write_file_atomic(
      run_dir_ / "reports" / ("epoch_" + std::to_string(epoch) + ".json"),
      j.dump(2) + "\n");
}

void Trainer::save_checkpoint_dir(const fs::path& dir) const {
  nets::save_checkpoint(model_->params, net_cfg_, dir);
  const auto opt = optim_.serialize();
  core::write_file_atomic(dir / "optim.bin", opt.data(), opt.size());
  // trainstate.json last: its presence marks the checkpoint complete.
  core::write_file_atomic(dir / "trainstate.json", state_to_json(state_));
}

void Trainer::load_checkpoint_dir(const fs::path& dir) {
  auto bundle = nets::load_checkpoint(dir, net_cfg_);
  nets::assign_params(bundle, model_->params);
  optim_.deserialize(core::read_file_bytes(dir / "optim.bin"));
  state_ = state_from_json(core::read_file_text(dir / "trainstate.json"));
}

std::filesystem::path Trainer::run(long max_epochs) {
  const long total = cfg_.epochs_embed + cfg_.epochs_gen;
  long remaining = max_epochs < 0 ? total : max_epochs;
  fs::path last_ck = run_dir_ / "checkpoints" /
                     ("epoch_" + std::to_string(state_.epoch));
  try {
    while (state_.epoch < total && remaining > 0) {
      const long epoch = state_.epoch + 1;
      const bool gen_phase = epoch > cfg_.epochs_embed;
      state_.phase = gen_phase ? "gen" : "embed";
      const auto t0 = std::chrono::steady_clock::now();

      const std::uint64_t shuffle_seed =
          master_rng_.child("batches", std::uint64_t(epoch)).next_u64();
      const auto batches = avdata::iterate_batches(
          manifest_, cfg_.batch_size, shuffle_seed, avdata::BatchMode::kTrain);
      if (batches.empty())
        throw DomainError(
            "trainer: training split has fewer samples than one batch");
      guidance_rng_ = master_rng_.child("guidance", std::uint64_t(epoch));

      std::vector<StepReport> reports;
      reports.reserve(batches.size());
      for (const auto& batch : batches) {
        StepReport rep;
        if (!gen_phase) {
          rep = embed_step(batch);
        } else {
          if (cfg_.keep_embed_supervision_in_gen &&
              !cfg_.freeze_encoders_in_gen)
            rep = embed_step(batch);
          StepReport gen = gen_step(batch);
          rep.step = gen.step;
          rep.losses.insert(rep.losses.end(), gen.losses.begin(),
                            gen.losses.end());
          for (const auto& g : gen.updated_a) rep.updated_a.push_back(g);
          for (const auto& g : gen.updated_b) rep.updated_b.push_back(g);
          std::sort(rep.updated_a.begin(), rep.updated_a.end());
          std::sort(rep.updated_b.begin(), rep.updated_b.end());
          rep.updated_b.erase(
              std::unique(rep.updated_b.begin(), rep.updated_b.end()),
              rep.updated_b.end());
        }
        append_csv(rep);
        reports.push_back(std::move(rep));
        state_.global_step += 1;
      }

      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      write_epoch_artifacts(epoch, reports, seconds);
      state_.epoch = epoch;
      if (state_.epoch == total) state_.phase = "done";
      last_ck =
          run_dir_ / "checkpoints" / ("epoch_" + std::to_string(epoch));
      save_checkpoint_dir(last_ck);
      remaining -= 1;
    }
  } catch (const DivergenceError&) {
    save_checkpoint_dir(run_dir_ / "checkpoints" / "crash");
    throw;
  }
  return last_ck;
}

}  // namespace davs::train
