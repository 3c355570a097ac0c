// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "davs/audiofeat/mfcc.hpp"
#include "davs/avdata/image_png.hpp"
#include "davs/avdata/wav.hpp"
#include "davs/cli/avi.hpp"
#include "davs/core/autodiff.hpp"
#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"
#include "davs/evalsuite/evaluation.hpp"
#include "davs/evalsuite/metrics.hpp"
#include "davs/nets/checkpoint.hpp"

namespace davs::cli {

namespace fs = std::filesystem;
using core::NoGradGuard;
using core::Tensor;
using core::Var;
using nlohmann::json;

namespace {

// Maps the module error taxonomy onto the documented exit codes. The most
// specific types are tested first.
int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ShortSourceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitShortSource;
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged at step " << e.step() << " ("
              << e.loss_name() << "): " << e.what() << "\n"
              << "a crash checkpoint was saved under checkpoints/crash\n";
    return kExitDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StorageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw StorageError("cannot create directory " + dir.string() + ": " +
                             ec.message());
}

// Every command writes the fully resolved config as its first side effect.
void echo_config(const fs::path& out_dir, const AppConfig& cfg) {
  ensure_dir(out_dir);
  core::write_file_atomic(out_dir / "config.json",
                          app_config_to_json(cfg).dump(2) + "\n");
}

// First dotted path where two JSON documents disagree, if any.
std::optional<std::string> first_json_diff(const json& a, const json& b,
                                           const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const auto& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!a.contains(k) || !b.contains(k)) return path;
      if (auto d = first_json_diff(a.at(k), b.at(k), path)) return d;
    }
    return std::nullopt;
  }
  if (a != b) return prefix.empty() ? std::string("<root>") : prefix;
  return std::nullopt;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void check_checkpoint_fits_data(const nets::NetworkConfig& net,
                                const avdata::Manifest& m) {
  if (net.n_words != m.toy.n_words || net.n_persons != m.toy.n_persons ||
      net.frame_size != m.toy.frame_size ||
      net.frames_per_clip != m.toy.frames_per_clip)
    throw ConfigError(
        "checkpoint was trained for a different dataset recipe (words " +
        std::to_string(net.n_words) + "/" + std::to_string(m.toy.n_words) +
        ", persons " + std::to_string(net.n_persons) + "/" +
        std::to_string(m.toy.n_persons) + ", frame size " +
        std::to_string(net.frame_size) + "/" +
        std::to_string(m.toy.frame_size) + ", clip length " +
        std::to_string(net.frames_per_clip) + "/" +
        std::to_string(m.toy.frames_per_clip) + ")");
}

std::string fmt_metric(double v) {
  if (std::isnan(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_report_table(const evalsuite::MetricReport& r) {
  const std::pair<const char*, double> rows[] = {
      {"visual_acc", r.visual_acc},
      {"audio_acc", r.audio_acc},
      {"combined_acc", r.combined_acc},
      {"retrieval_v2a_R@1", r.retrieval_v2a_r1},
      {"retrieval_v2a_R@10", r.retrieval_v2a_r10},
      {"retrieval_v2a_MedR", r.retrieval_v2a_medr},
      {"retrieval_a2v_R@1", r.retrieval_a2v_r1},
      {"retrieval_a2v_R@10", r.retrieval_a2v_r10},
      {"retrieval_a2v_MedR", r.retrieval_a2v_medr},
      {"psnr_db", r.psnr_db},
      {"ssim", r.ssim},
      {"probe_acc_before", r.probe_acc_before},
      {"probe_acc_after", r.probe_acc_after},
      {"gen_retrieval_R@1", r.gen_retrieval_r1},
      {"openness_l2", r.openness_l2},
      {"id_sq_l2", r.id_sq_l2},
  };
  std::printf("%-22s %s\n", "metric", "value");
  for (const auto& [name, value] : rows)
    std::printf("%-22s %s\n", name, fmt_metric(value).c_str());
}

// Loads an identity frame from a PNG or a raw float32 blob (first frame of
// a clip blob) and checks it against the generator's input size.
Tensor<float> load_identity_image(const fs::path& path, long frame_size) {
  Tensor<float> img;
  if (path.extension() == ".png") {
    img = avdata::read_png_rgb8(path);
  } else {
    Tensor<float> blob = avdata::read_frames_f32raw(path);
    if (blob.ndim() == 4) {
      Tensor<float> first({blob.dim(1), blob.dim(2), blob.dim(3)});
      std::copy_n(blob.data(), first.numel(), first.data());
      img = first;
    } else if (blob.ndim() == 3) {
      img = blob;
    } else {
      throw ConfigError("identity image blob must be (H,W,3) or (T,H,W,3): " +
                        path.string());
    }
  }
  if (img.dim(0) != frame_size || img.dim(1) != frame_size)
    throw ConfigError("identity image is " + std::to_string(img.dim(0)) + "x" +
                      std::to_string(img.dim(1)) + " but the model expects " +
                      std::to_string(frame_size) + "x" +
                      std::to_string(frame_size) + ": " + path.string());
  return img;
}

// Loads a visual speech source: a directory of PNG frames (sorted by name)
// or one raw float32 clip blob. Returns (F, H, W, 3).
Tensor<float> load_source_frames(const fs::path& path, long frame_size) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".png")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw ConfigError("no .png frames found in " + path.string());
    Tensor<float> out({long(files.size()), frame_size, frame_size, 3});
    for (size_t i = 0; i < files.size(); ++i) {
      const auto img = avdata::read_png_rgb8(files[i]);
      if (img.dim(0) != frame_size || img.dim(1) != frame_size)
        throw ConfigError("frame " + files[i].string() + " is " +
                          std::to_string(img.dim(0)) + "x" +
                          std::to_string(img.dim(1)) + ", expected " +
                          std::to_string(frame_size) + "x" +
                          std::to_string(frame_size));
      std::copy_n(img.data(), img.numel(),
                  out.data() + long(i) * img.numel());
    }
    return out;
  }
  Tensor<float> blob = avdata::read_frames_f32raw(path);
  if (blob.ndim() != 4 || blob.dim(3) != 3)
    throw ConfigError("source clip blob must be (T,H,W,3): " + path.string());
  if (blob.dim(1) != frame_size || blob.dim(2) != frame_size)
    throw ConfigError("source frames are " + std::to_string(blob.dim(1)) +
                      "x" + std::to_string(blob.dim(2)) +
                      " but the model expects " + std::to_string(frame_size) +
                      "x" + std::to_string(frame_size));
  return blob;
}

}  // namespace

int cmd_toygen(const RunSpec& spec) {
  return run_guarded([&] {
    data_worker_cap();
    const AppConfig cfg = load_app_config(spec.config_path, spec.overrides);
    echo_config(spec.out_dir, cfg);
    const auto manifests = avdata::generate_toy_dataset(cfg.toy, spec.out_dir);
    const char* names[] = {"train", "val", "test"};
    for (size_t i = 0; i < manifests.size(); ++i) {
      const auto m = avdata::load_manifest(manifests[i]);
      std::printf("%s: %ld records (%s)\n", names[i], long(m.records.size()),
                  manifests[i].string().c_str());
    }
  });
}

int cmd_train(const RunSpec& spec, const TrainOptions& opts) {
  return run_guarded([&] {
    data_worker_cap();
    if (opts.phase != "embed" && opts.phase != "gen" && opts.phase != "all")
      throw ConfigError("--phase must be embed, gen or all, got '" +
                        opts.phase + "'");
    const AppConfig cfg = load_app_config(spec.config_path, spec.overrides);
    const auto manifest = avdata::load_manifest(opts.data_manifest);

    std::unique_ptr<train::Trainer> trainer;
    if (opts.resume) {
      if (!spec.config_path.empty() || !spec.overrides.empty()) {
        // A resumed run keeps its stored configuration; a differing request
        // is refused rather than silently ignored.
        json stored;
        try {
          stored = json::parse(
              core::read_file_text(spec.out_dir / "config.json"));
        } catch (const json::exception& e) {
          throw FormatError("config.json: " + std::string(e.what()));
        }
        const json requested = app_config_to_json(cfg);
        for (const char* section : {"network", "train", "weights"}) {
          if (!stored.contains(section)) continue;
          if (auto d = first_json_diff(requested.at(section),
                                       stored.at(section), section))
            throw ConfigError("requested config conflicts with the run's "
                              "stored config at '" +
                              *d + "'; resume without overrides or start a "
                              "fresh run directory");
        }
      }
      trainer = train::Trainer::resume(spec.out_dir, manifest);
    } else {
      if (fs::exists(spec.out_dir / "config.json"))
        throw ConfigError("run directory " + spec.out_dir.string() +
                          " is already initialized; pass --resume to "
                          "continue it");
      ensure_dir(spec.out_dir);
      json extra;
      extra["toy"] = json::parse(avdata::toy_config_to_json(cfg.toy));
      extra["eval"] = app_config_to_json(cfg).at("eval");
      trainer = std::make_unique<train::Trainer>(spec.out_dir, cfg.network,
                                                 cfg.train, manifest, extra);
    }

    const auto& tc = trainer->config();
    const long total = tc.epochs_embed + tc.epochs_gen;
    long target = total;
    if (opts.phase == "embed") target = tc.epochs_embed;
    if (opts.phase == "gen" && trainer->state().epoch < tc.epochs_embed)
      throw ConfigError(
          "--phase gen requires a completed embedding phase (run is at epoch " +
          std::to_string(trainer->state().epoch) + " of " +
          std::to_string(tc.epochs_embed) + " embedding epochs)");

    const long remaining = target - trainer->state().epoch;
    if (remaining > 0) trainer->run(remaining);

    const long epoch = trainer->state().epoch;
    if (epoch >= 1)
      std::printf("final checkpoint: %s\n",
                  (spec.out_dir / "checkpoints" /
                   ("epoch_" + std::to_string(epoch)))
                      .string()
                      .c_str());
    else
      std::printf("no epochs ran for phase '%s'\n", opts.phase.c_str());
  });
}

int cmd_eval(const RunSpec& spec, const EvalOptions& opts) {
  return run_guarded([&] {
    data_worker_cap();
    static const std::set<std::string> known = {"recognition", "retrieval",
                                                "probe", "psnr", "fidelity"};
    std::set<std::string> selected(opts.metrics.begin(), opts.metrics.end());
    if (selected.empty()) selected = known;
    for (const auto& m : selected)
      if (!known.count(m))
        throw ConfigError("unknown metric '" + m +
                          "' (choose from recognition, retrieval, probe, "
                          "psnr, fidelity)");
    if (selected.count("probe") && opts.train_manifest.empty())
      throw ConfigError("--metrics probe requires --train-data with the "
                        "manifest used to fit the probe");

    AppConfig cfg = load_app_config(spec.config_path, spec.overrides);
    const auto bundle = nets::load_checkpoint(opts.checkpoint);
    const auto manifest = avdata::load_manifest(opts.data_manifest);
    check_checkpoint_fits_data(bundle.config, manifest);

    // The checkpoint and the data carry the actual recipes; the echoed
    // config states what really runs.
    cfg.network = bundle.config;
    cfg.toy = manifest.toy;
    cfg.validate();
    echo_config(spec.out_dir, cfg);

    nets::DavsModel<float> model(bundle.config);
    nets::assign_params(bundle, model.params);

    evalsuite::MetricReport report;
    report.config_hash = bundle.hash;
    report.checkpoint = opts.checkpoint.string();
    report.generated_at = utc_timestamp();

    if (selected.count("recognition")) {
      const auto acc = evalsuite::recognition_accuracy(manifest, model);
      report.visual_acc = acc.visual;
      report.audio_acc = acc.audio;
      report.combined_acc = acc.combined;
    }
    if (selected.count("retrieval")) {
      const auto v2a = evalsuite::retrieval(manifest, model, "v2a");
      const auto a2v = evalsuite::retrieval(manifest, model, "a2v");
      report.retrieval_v2a_r1 = v2a.r1;
      report.retrieval_v2a_r10 = v2a.r10;
      report.retrieval_v2a_medr = v2a.medr;
      report.retrieval_a2v_r1 = a2v.r1;
      report.retrieval_a2v_r10 = a2v.r10;
      report.retrieval_a2v_medr = a2v.medr;
    }
    if (selected.count("probe")) {
      const auto train_manifest = avdata::load_manifest(opts.train_manifest);
      check_checkpoint_fits_data(bundle.config, train_manifest);
      evalsuite::ProbeSpec ps;
      ps.l2_regularization = cfg.eval.probe_l2;
      ps.max_iterations = cfg.eval.probe_iterations;
      report.probe_acc_after =
          evalsuite::disentanglement_probe(train_manifest, manifest, model, ps);
    }
    if (selected.count("psnr") || selected.count("fidelity")) {
      const auto fid = evalsuite::generation_fidelity(manifest, model,
                                                      cfg.eval.fidelity_source);
      if (selected.count("psnr")) {
        report.psnr_db = fid.psnr_db;
        report.ssim = fid.ssim;
      }
      if (selected.count("fidelity")) {
        report.gen_retrieval_r1 = fid.gen_retrieval_r1;
        report.openness_l2 = fid.openness_l2;
        report.id_sq_l2 = fid.id_sq_l2;
      }
    }

    core::write_file_atomic(spec.out_dir / "report.json",
                            evalsuite::metric_report_to_json(report).dump(2) +
                                "\n");
    print_report_table(report);
    std::printf("report: %s\n", (spec.out_dir / "report.json").string().c_str());
  });
}

int cmd_infer(const RunSpec& spec, const InferOptions& opts) {
  return run_guarded([&] {
    data_worker_cap();
    if (opts.source_kind != "audio" && opts.source_kind != "video")
      throw ConfigError("--source-kind must be audio or video, got '" +
                        opts.source_kind + "'");
    AppConfig cfg = load_app_config(spec.config_path, spec.overrides);
    const auto bundle = nets::load_checkpoint(opts.checkpoint);
    cfg.network = bundle.config;
    // The toy section provides the frame rate used to window the source;
    // it must agree with the checkpoint's clip geometry.
    cfg.toy.n_words = bundle.config.n_words;
    cfg.toy.n_persons = bundle.config.n_persons;
    cfg.toy.frame_size = bundle.config.frame_size;
    cfg.toy.frames_per_clip = bundle.config.frames_per_clip;
    cfg.validate();
    echo_config(spec.out_dir, cfg);

    nets::DavsModel<float> model(bundle.config);
    nets::assign_params(bundle, model.params);
    const long t = bundle.config.frames_per_clip;
    const long size = bundle.config.frame_size;
    const long fps = cfg.toy.fps;

    const auto identity = load_identity_image(opts.identity_image, size);

    NoGradGuard ng;
    Tensor<float> id_stack({1, size, size, 3});
    std::copy_n(identity.data(), identity.numel(), id_stack.data());
    const auto f_p =
        model.encode_pid(Var<float>(nets::nchw_from_hwc<float>(id_stack)));

    // Window the source into consecutive whole clips; a source shorter than
    // one clip is refused rather than silently padded.
    long n_clips = 0;
    audiofeat::MfccSequence mfcc_seq;
    Tensor<float> source_frames;
    if (opts.source_kind == "audio") {
      const auto wav = avdata::read_wav_pcm16(opts.speech_source);
      audiofeat::MfccConfig mf;
      mf.sample_rate = wav.sample_rate;
      mf.validate();
      const long frames_equiv =
          long(wav.samples.size()) * fps / wav.sample_rate;
      n_clips = frames_equiv / t;
      if (n_clips == 0)
        throw ShortSourceError(
            "audio source covers " + std::to_string(frames_equiv) +
            " video frames; one clip needs " + std::to_string(t) +
            " (about " + std::to_string(double(t) / double(fps)) +
            " s of audio)");
      mfcc_seq = audiofeat::mfcc(wav.samples, mf);
    } else {
      source_frames = load_source_frames(opts.speech_source, size);
      n_clips = source_frames.dim(0) / t;
      if (n_clips == 0)
        throw ShortSourceError("video source has " +
                               std::to_string(source_frames.dim(0)) +
                               " frames; one clip needs " + std::to_string(t));
    }

    const fs::path frames_dir = spec.out_dir / "frames";
    ensure_dir(frames_dir);
    Tensor<float> all_frames({n_clips * t, size, size, 3});
    const std::vector<long> first_row(size_t(t), 0);
    for (long k = 0; k < n_clips; ++k) {
      Var<float> content;
      if (opts.source_kind == "audio") {
        Tensor<float> blocks({t, 1, 12, 20});
        for (long f = 0; f < t; ++f) {
          const auto block = audiofeat::align_block(mfcc_seq, k * t + f, fps);
          float* dst = blocks.data() + f * 12 * 20;
          for (long i = 0; i < 12 * 20; ++i) dst[i] = float(block[i]);
        }
        content = model.encode_aud_wid(Var<float>(blocks));
      } else {
        Tensor<float> clip({t, size, size, 3});
        std::copy_n(source_frames.data() + k * t * size * size * 3,
                    clip.numel(), clip.data());
        content =
            model.encode_vid_wid(Var<float>(nets::nchw_from_hwc<float>(clip)));
      }
      const auto fake =
          model.decode(core::gather_rows(f_p, first_row), content).value();
      const auto hwc = nets::hwc_from_nchw(fake);  // (T, H, W, 3)
      std::copy_n(hwc.data(), hwc.numel(),
                  all_frames.data() + k * t * size * size * 3);
      for (long f = 0; f < t; ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05ld.png", k * t + f);
        Tensor<float> frame({size, size, 3});
        std::copy_n(hwc.data() + f * size * size * 3, frame.numel(),
                    frame.data());
        avdata::write_png_rgb8(frames_dir / name, frame);
      }
    }

    std::printf("wrote %ld frames: %s/frame_00000.png .. frame_%05ld.png\n",
                n_clips * t, frames_dir.string().c_str(), n_clips * t - 1);
    if (opts.write_video) {
      const fs::path avi = spec.out_dir / "clip.avi";
      write_avi_rgb24(avi, all_frames, fps);
      std::printf("wrote video: %s\n", avi.string().c_str());
    }
  });
}

}  // namespace davs::cli
