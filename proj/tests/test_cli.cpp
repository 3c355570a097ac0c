// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "davs/avdata/dataset.hpp"
#include "davs/avdata/image_png.hpp"
#include "davs/avdata/wav.hpp"
#include "davs/cli/avi.hpp"
#include "davs/cli/commands.hpp"
#include "davs/cli/config.hpp"
#include "davs/core/io_util.hpp"
#include "doctest.h"

using namespace davs;
using namespace davs::cli;
using core::Tensor;

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("davs_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> tiny_overrides() {
  return {"toy.n_words=3",          "toy.n_persons=4",
          "toy.frames_per_clip=4",  "toy.frame_size=16",
          "toy.counts.train=10",    "toy.counts.val=2",
          "toy.counts.test=6",      "toy.seed=77",
          "network.n_words=3",      "network.n_persons=4",
          "network.frames_per_clip=4", "network.frame_size=16",
          "network.latent_dim=8",   "network.channels=[4,6]",
          "network.gan_feature_dim=8", "train.batch_size=5",
          "train.epochs_embed=1",   "train.epochs_gen=1",
          "train.seed=5"};
}

RunSpec spec_for(const fs::path& out,
                 std::vector<std::string> overrides = tiny_overrides()) {
  RunSpec s;
  s.out_dir = out;
  s.overrides = std::move(overrides);
  return s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One shared dataset plus one shared trained run for the heavier cases.
struct Fixture {
  fs::path root, toy_dir, run_dir;
  fs::path train_manifest, test_manifest, checkpoint;
  Fixture() {
    root = temp_dir("fixture");
    toy_dir = root / "toy";
    run_dir = root / "run";
    REQUIRE(cmd_toygen(spec_for(toy_dir)) == kExitOk);
    train_manifest = toy_dir / "train" / "manifest.json";
    test_manifest = toy_dir / "test" / "manifest.json";
    TrainOptions t;
    t.data_manifest = train_manifest;
    REQUIRE(cmd_train(spec_for(run_dir), t) == kExitOk);
    checkpoint = run_dir / "checkpoints" / "epoch_2";
    REQUIRE(fs::exists(checkpoint / "trainstate.json"));
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

// Lines of a report with the timestamp line removed, for byte comparisons.
std::string report_without_timestamp(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::string line, out;
  while (std::getline(in, line))
    if (line.find("generated_at") == std::string::npos) out += line + "\n";
  return out;
}

}  // namespace

TEST_CASE("overrides parse values as JSON and reject malformed keys") {
  json doc = app_config_to_json(AppConfig{});
  apply_override(doc, "toy.n_words=5");
  CHECK(doc.at("toy").at("n_words") == 5);
  apply_override(doc, "eval.fidelity_source=video");
  CHECK(doc.at("eval").at("fidelity_source") == "video");
  apply_override(doc, "eval.fidelity_source=\"audio\"");
  CHECK(doc.at("eval").at("fidelity_source") == "audio");
  apply_override(doc, "network.channels=[4,6]");
  CHECK(doc.at("network").at("channels") == json::array({4, 6}));
  apply_override(doc, "train.adam.beta1=0.9");
  CHECK(doc.at("train").at("adam").at("beta1") == 0.9);

  CHECK_THROWS_AS(apply_override(doc, "no_equals"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=5"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "toplevel=5"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "toy..n_words=5"), ConfigError);
}

TEST_CASE("config layering: defaults, file, then overrides") {
  const auto dir = temp_dir("cfg");
  core::write_file_atomic(dir / "c.json", std::string(R"({
    "toy": {"n_words": 4, "n_persons": 4, "frame_size": 16,
            "frames_per_clip": 4},
    "network": {"n_words": 4, "n_persons": 4, "frame_size": 16,
                "frames_per_clip": 4},
    "weights": {"alpha": 50.0}
  })"));
  const auto cfg =
      load_app_config(dir / "c.json", {"toy.n_words=5", "network.n_words=5"});
  CHECK(cfg.toy.n_words == 5);         // override beats file
  CHECK(cfg.toy.n_persons == 4);       // file beats default
  CHECK(cfg.toy.fps == 25);            // default survives
  CHECK(cfg.train.weights.alpha == 50.0);
  CHECK(cfg.train.batch_size == 18);

  // Unknown keys anywhere are refused, not ignored.
  core::write_file_atomic(dir / "bad1.json", std::string(R"({"toys": {}})"));
  CHECK_THROWS_AS(load_app_config(dir / "bad1.json", {}), ConfigError);
  core::write_file_atomic(dir / "bad2.json",
                          std::string(R"({"toy": {"n_wordz": 5}})"));
  CHECK_THROWS_AS(load_app_config(dir / "bad2.json", {}), ConfigError);
  CHECK_THROWS_AS(load_app_config(fs::path(), {"toy.n_wordz=5"}), ConfigError);
  // Loss weights live in their own section, not inside train.
  core::write_file_atomic(dir / "bad3.json",
                          std::string(R"({"train": {"weights": {}}})"));
  CHECK_THROWS_AS(load_app_config(dir / "bad3.json", {}), ConfigError);
  // Cross-section consistency is enforced.
  CHECK_THROWS_AS(load_app_config(fs::path(), {"toy.n_words=5"}), ConfigError);

  const auto rt = app_config_from_json(app_config_to_json(cfg));
  CHECK(app_config_to_json(rt) == app_config_to_json(cfg));

  EvalConfig bad;
  bad.fidelity_source = "text";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = EvalConfig{};
  bad.probe_iterations = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("worker cap env variable validates as a positive integer") {
  unsetenv("DAVS_NUM_WORKERS");
  CHECK(data_worker_cap() == 1);
  setenv("DAVS_NUM_WORKERS", "4", 1);
  CHECK(data_worker_cap() == 4);
  setenv("DAVS_NUM_WORKERS", "zero", 1);
  CHECK_THROWS_AS(data_worker_cap(), ConfigError);
  setenv("DAVS_NUM_WORKERS", "0", 1);
  CHECK_THROWS_AS(data_worker_cap(), ConfigError);
  unsetenv("DAVS_NUM_WORKERS");
}

TEST_CASE("avi writer emits a parseable RIFF with exact pixels") {
  const auto dir = temp_dir("avi");
  Tensor<float> frames({2, 3, 5, 3});
  for (long i = 0; i < frames.numel(); ++i)
    frames[i] = float(i) / float(frames.numel() - 1);
  write_avi_rgb24(dir / "x.avi", frames, 25);

  const auto bytes = core::read_file_bytes(dir / "x.avi");
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RIFF");
  const auto u32 = [&](size_t at) {
    return std::uint32_t(bytes[at]) | (std::uint32_t(bytes[at + 1]) << 8) |
           (std::uint32_t(bytes[at + 2]) << 16) |
           (std::uint32_t(bytes[at + 3]) << 24);
  };
  CHECK(u32(4) + 8 == bytes.size());
  CHECK(std::string(bytes.begin() + 8, bytes.begin() + 12) == "AVI ");

  // Locate the first frame chunk and verify BGR bottom-up rows with
  // 4-byte-aligned stride (w=5 -> 16 bytes per row).
  const std::string blob(bytes.begin(), bytes.end());
  const auto movi = blob.find("movi");
  REQUIRE(movi != std::string::npos);
  const auto chunk = blob.find("00db", movi);
  REQUIRE(chunk != std::string::npos);
  const size_t data = chunk + 8;
  const long h = 3, w = 5, stride = 16;
  CHECK(u32(chunk + 4) == std::uint32_t(stride * h));
  for (long row = 0; row < h; ++row)
    for (long col = 0; col < w; ++col) {
      const size_t at = data + size_t((h - 1 - row) * stride + col * 3);
      const float* px = frames.data() + (row * w + col) * 3;
      CHECK(bytes[at] == std::uint8_t(std::lround(px[2] * 255.0f)));
      CHECK(bytes[at + 1] == std::uint8_t(std::lround(px[1] * 255.0f)));
      CHECK(bytes[at + 2] == std::uint8_t(std::lround(px[0] * 255.0f)));
    }
  CHECK(blob.find("idx1") != std::string::npos);

  Tensor<float> bad({2, 3, 5, 2}, 0.5f);
  CHECK_THROWS_AS(write_avi_rgb24(dir / "y.avi", bad, 25), ContractError);
  CHECK_THROWS_AS(write_avi_rgb24(dir / "y.avi", frames, 0), ContractError);
}

TEST_CASE("toygen echoes its config first and honors overrides") {
  auto& f = fixture();
  const auto echoed = json::parse(read_text(f.toy_dir / "config.json"));
  CHECK(echoed.at("toy").at("n_words") == 3);
  CHECK(echoed.at("weights").at("alpha") == 100.0);
  CHECK(echoed.contains("eval"));

  const auto m = avdata::load_manifest(f.train_manifest);
  CHECK(m.records.size() == 10);
  for (const auto& r : m.records) {
    CHECK(r.word_id >= 0);
    CHECK(r.word_id < 3);
  }

  // Invalid config: nothing is written, not even the echo.
  const auto bad_out = temp_dir("toygen_bad");
  auto ov = tiny_overrides();
  ov.push_back("toy.n_words=0");
  ov.push_back("network.n_words=0");
  CHECK(cmd_toygen(spec_for(bad_out, ov)) == kExitConfig);
  CHECK(!fs::exists(bad_out / "config.json"));

  // Unwritable output location -> I/O error.
  const auto file_block = temp_dir("toygen_blocked") / "plain_file";
  core::write_file_atomic(file_block, std::string("x"));
  CHECK(cmd_toygen(spec_for(file_block / "sub")) == kExitIo);
}

TEST_CASE("train runs phases, refuses double init, resumes consistently") {
  auto& f = fixture();
  CHECK(fs::exists(f.run_dir / "logs" / "losses.csv"));
  CHECK(fs::exists(f.run_dir / "reports" / "epoch_1.json"));
  CHECK(fs::exists(f.run_dir / "reports" / "epoch_2.json"));

  TrainOptions t;
  t.data_manifest = f.train_manifest;
  // Starting over in an initialized directory needs --resume.
  CHECK(cmd_train(spec_for(f.run_dir), t) == kExitConfig);

  // Phased run: embed only, then resume into gen.
  const auto dir = temp_dir("phased");
  TrainOptions embed = t;
  embed.phase = "embed";
  CHECK(cmd_train(spec_for(dir), embed) == kExitOk);
  const auto st1 = json::parse(
      read_text(dir / "checkpoints" / "epoch_1" / "trainstate.json"));
  CHECK(st1.at("epoch") == 1);
  CHECK(!fs::exists(dir / "checkpoints" / "epoch_2"));

  TrainOptions gen = t;
  gen.phase = "gen";
  gen.resume = true;
  CHECK(cmd_train(spec_for(dir, {}), gen) == kExitOk);
  const auto st2 = json::parse(
      read_text(dir / "checkpoints" / "epoch_2" / "trainstate.json"));
  CHECK(st2.at("epoch") == 2);
  CHECK(st2.at("phase") == "done");

  // gen before embed is refused.
  const auto dir2 = temp_dir("gen_first");
  TrainOptions gen_fresh = t;
  gen_fresh.phase = "gen";
  CHECK(cmd_train(spec_for(dir2), gen_fresh) == kExitConfig);

  // Conflicting resume config names the first mismatching key.
  TrainOptions resume_conflict = t;
  resume_conflict.resume = true;
  auto ov = tiny_overrides();
  ov.push_back("train.batch_size=4");
  CHECK(cmd_train(spec_for(f.run_dir, ov), resume_conflict) == kExitConfig);

  // Bad phase name.
  TrainOptions bad = t;
  bad.phase = "warmup";
  CHECK(cmd_train(spec_for(temp_dir("badphase")), bad) == kExitConfig);
}

TEST_CASE("train exits 4 on divergence after saving a crash checkpoint") {
  auto& f = fixture();
  const auto dir = temp_dir("diverge");
  auto ov = tiny_overrides();
  ov.push_back("train.learning_rate=1e30");
  TrainOptions t;
  t.data_manifest = f.train_manifest;
  CHECK(cmd_train(spec_for(dir, ov), t) == kExitDiverged);
  CHECK(fs::exists(dir / "checkpoints" / "crash" / "trainstate.json"));
}

TEST_CASE("eval writes a selective, rerun-stable report") {
  auto& f = fixture();
  const auto dir = temp_dir("eval_sel");
  EvalOptions e;
  e.checkpoint = f.checkpoint;
  e.data_manifest = f.test_manifest;
  e.metrics = {"retrieval"};
  REQUIRE(cmd_eval(spec_for(dir, {}), e) == kExitOk);
  const auto report = json::parse(read_text(dir / "report.json"));
  CHECK(report.at("visual_acc").is_null());
  CHECK(report.at("psnr_db").is_null());
  CHECK(report.at("probe_acc_after").is_null());
  CHECK(report.at("retrieval").at("v2a").at("R@1").is_number());
  CHECK(report.at("retrieval").at("a2v").at("MedR").is_number());
  CHECK(report.at("checkpoint") == f.checkpoint.string());
  CHECK(report.at("config_hash").is_string());

  // Identical rerun: byte-identical except the timestamp.
  const auto dir2 = temp_dir("eval_sel2");
  REQUIRE(cmd_eval(spec_for(dir2, {}), e) == kExitOk);
  CHECK(report_without_timestamp(dir / "report.json") ==
        report_without_timestamp(dir2 / "report.json"));
  CHECK(report_without_timestamp(dir / "report.json").size() > 100);

  // The full run populates everything the single-checkpoint protocol can.
  const auto dir3 = temp_dir("eval_full");
  EvalOptions full = e;
  full.metrics = {};
  full.train_manifest = f.train_manifest;
  REQUIRE(cmd_eval(spec_for(dir3, {}), full) == kExitOk);
  const auto fullj = json::parse(read_text(dir3 / "report.json"));
  CHECK(fullj.at("visual_acc").is_number());
  CHECK(fullj.at("psnr_db").is_number());
  CHECK(fullj.at("ssim").is_number());
  CHECK(fullj.at("probe_acc_after").is_number());
  CHECK(fullj.at("gen_retrieval_r1").is_number());
  CHECK(fullj.at("openness_l2").is_number());
  CHECK(fullj.at("id_sq_l2").is_number());
  CHECK(fullj.at("probe_acc_before").is_null());  // needs a baseline run

  EvalOptions bad = e;
  bad.metrics = {"bleu"};
  CHECK(cmd_eval(spec_for(temp_dir("eval_bad"), {}), bad) == kExitConfig);
  EvalOptions no_train = e;
  no_train.metrics = {"probe"};
  CHECK(cmd_eval(spec_for(temp_dir("eval_np"), {}), no_train) == kExitConfig);
  EvalOptions gone = e;
  gone.checkpoint = f.root / "nowhere";
  CHECK(cmd_eval(spec_for(temp_dir("eval_gone"), {}), gone) == kExitIo);
}

TEST_CASE("infer generates deterministic frames from either source kind") {
  auto& f = fixture();
  const auto m = avdata::load_manifest(f.test_manifest);
  REQUIRE(m.records.size() >= 2);
  const fs::path identity = m.dir / m.records[0].frames_path;
  const fs::path wav = m.dir / m.records[1].audio_path;
  const fs::path frames = m.dir / m.records[1].frames_path;

  InferOptions audio;
  audio.checkpoint = f.checkpoint;
  audio.identity_image = identity;
  audio.speech_source = wav;
  audio.source_kind = "audio";
  audio.write_video = true;
  const auto dir_a = temp_dir("infer_a");
  REQUIRE(cmd_infer(spec_for(dir_a, {}), audio) == kExitOk);
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05d.png", i);
    CHECK(fs::exists(dir_a / "frames" / name));
  }
  CHECK(!fs::exists(dir_a / "frames" / "frame_00004.png"));
  CHECK(fs::exists(dir_a / "clip.avi"));
  const auto png0 = avdata::read_png_rgb8(dir_a / "frames" / "frame_00000.png");
  CHECK(png0.dim(0) == 16);

  // Bit-for-bit determinism across reruns.
  const auto dir_b = temp_dir("infer_b");
  REQUIRE(cmd_infer(spec_for(dir_b, {}), audio) == kExitOk);
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05d.png", i);
    CHECK(core::read_file_bytes(dir_a / "frames" / name) ==
          core::read_file_bytes(dir_b / "frames" / name));
  }

  InferOptions video = audio;
  video.speech_source = frames;
  video.source_kind = "video";
  video.write_video = false;
  const auto dir_v = temp_dir("infer_v");
  REQUIRE(cmd_infer(spec_for(dir_v, {}), video) == kExitOk);
  CHECK(fs::exists(dir_v / "frames" / "frame_00003.png"));
  CHECK(!fs::exists(dir_v / "clip.avi"));

  // A PNG frame directory works as a video source too.
  const auto png_dir = temp_dir("png_source");
  const auto clip = avdata::read_frames_f32raw(frames);
  for (long t = 0; t < clip.dim(0); ++t) {
    Tensor<float> one({clip.dim(1), clip.dim(2), 3});
    std::copy_n(clip.data() + t * one.numel(), one.numel(), one.data());
    char name[32];
    std::snprintf(name, sizeof name, "f_%02ld.png", t);
    avdata::write_png_rgb8(png_dir / name, one);
  }
  InferOptions from_pngs = video;
  from_pngs.speech_source = png_dir;
  const auto dir_p = temp_dir("infer_p");
  REQUIRE(cmd_infer(spec_for(dir_p, {}), from_pngs) == kExitOk);
  CHECK(fs::exists(dir_p / "frames" / "frame_00003.png"));

  // Short audio is refused with the dedicated exit code.
  std::vector<double> short_wave(size_t(800), 0.25);
  avdata::write_wav_pcm16(f.root / "short.wav", short_wave, 8000);
  InferOptions short_src = audio;
  short_src.speech_source = f.root / "short.wav";
  CHECK(cmd_infer(spec_for(temp_dir("infer_s"), {}), short_src) ==
        kExitShortSource);

  InferOptions bad_kind = audio;
  bad_kind.source_kind = "text";
  CHECK(cmd_infer(spec_for(temp_dir("infer_k"), {}), bad_kind) == kExitConfig);
  InferOptions gone = audio;
  gone.identity_image = f.root / "missing.png";
  CHECK(cmd_infer(spec_for(temp_dir("infer_g"), {}), gone) == kExitIo);
}

TEST_CASE("long audio sources window into consecutive clips") {
  auto& f = fixture();
  const auto m = avdata::load_manifest(f.test_manifest);
  const fs::path identity = m.dir / m.records[0].frames_path;

  // 0.40 s at 8 kHz = 10 video frames at 25 fps = 2 whole clips of 4, with
  // a 2-frame tail that is dropped.
  std::vector<double> wave(size_t(3200));
  for (size_t i = 0; i < wave.size(); ++i)
    wave[i] = 0.5 * std::sin(2.0 * 3.14159265358979 * 440.0 * double(i) / 8000.0);
  avdata::write_wav_pcm16(f.root / "long.wav", wave, 8000);

  InferOptions opts;
  opts.checkpoint = f.checkpoint;
  opts.identity_image = identity;
  opts.speech_source = f.root / "long.wav";
  opts.source_kind = "audio";
  const auto dir = temp_dir("infer_long");
  REQUIRE(cmd_infer(spec_for(dir, {}), opts) == kExitOk);
  CHECK(fs::exists(dir / "frames" / "frame_00007.png"));
  CHECK(!fs::exists(dir / "frames" / "frame_00008.png"));
}
