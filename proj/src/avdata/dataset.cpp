// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/avdata/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

#include "davs/avdata/image_png.hpp"
#include "davs/avdata/wav.hpp"
#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"
#include "json.hpp"

namespace davs::avdata {

namespace fs = std::filesystem;
using njson = nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "davs-toy-manifest-v1";

njson toy_to_json_obj(const ToyWorldConfig& c) {
  return njson{{"n_words", c.n_words},
               {"n_persons", c.n_persons},
               {"frames_per_clip", c.frames_per_clip},
               {"frame_size", c.frame_size},
               {"fps", c.fps},
               {"audio_sample_rate", c.audio_sample_rate},
               {"carrier_hz", c.carrier_hz},
               {"trajectory_noise", c.trajectory_noise},
               {"render_noise", c.render_noise},
               {"seed", c.seed},
               {"counts", njson{{"train", c.counts.train},
                                {"val", c.counts.val},
                                {"test", c.counts.test}}},
               {"frames_format", c.frames_format}};
}

template <typename T>
void read_field(const njson& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const njson::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

ToyWorldConfig toy_from_json_obj(const njson& obj) {
  if (!obj.is_object()) throw ConfigError("toy config must be a JSON object");
  static const std::vector<std::string> known = {
      "n_words",       "n_persons",  "frames_per_clip", "frame_size",
      "fps",           "audio_sample_rate", "carrier_hz", "trajectory_noise",
      "render_noise",  "seed",       "counts",          "frames_format"};
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown toy config key: " + it.key());
  ToyWorldConfig c;
  read_field(obj, "n_words", c.n_words);
  read_field(obj, "n_persons", c.n_persons);
  read_field(obj, "frames_per_clip", c.frames_per_clip);
  read_field(obj, "frame_size", c.frame_size);
  read_field(obj, "fps", c.fps);
  read_field(obj, "audio_sample_rate", c.audio_sample_rate);
  read_field(obj, "carrier_hz", c.carrier_hz);
  read_field(obj, "trajectory_noise", c.trajectory_noise);
  read_field(obj, "render_noise", c.render_noise);
  read_field(obj, "seed", c.seed);
  if (obj.contains("counts")) {
    const auto& cn = obj.at("counts");
    if (!cn.is_object()) throw ConfigError("toy counts must be an object");
    for (auto it = cn.begin(); it != cn.end(); ++it)
      if (it.key() != "train" && it.key() != "val" && it.key() != "test")
        throw ConfigError("unknown toy counts key: " + it.key());
    read_field(cn, "train", c.counts.train);
    read_field(cn, "val", c.counts.val);
    read_field(cn, "test", c.counts.test);
  }
  read_field(obj, "frames_format", c.frames_format);
  return c;
}

njson parse_json_text(const std::string& text, const std::string& what) {
  try {
    return njson::parse(text);
  } catch (const njson::exception& e) {
    throw FormatError("malformed JSON in " + what + ": " + e.what());
  }
}

std::string sample_name(const std::string& split, long i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06ld", split.c_str(), i);
  return buf;
}

}  // namespace

std::string toy_config_to_json(const ToyWorldConfig& cfg) {
  return toy_to_json_obj(cfg).dump(2);
}

ToyWorldConfig toy_config_from_json_text(const std::string& text) {
  return toy_from_json_obj(parse_json_text(text, "toy config"));
}

void write_frames_f32raw(const fs::path& path, const core::Tensor<float>& t) {
  core::write_file_atomic(path, t.data(), sizeof(float) * t.numel());
  njson meta{{"dtype", "float32"},
             {"order", "C"},
             {"shape", t.shape()}};
  core::write_file_atomic(fs::path(path.string() + ".meta.json"),
                          meta.dump(2) + "\n");
}

core::Tensor<float> read_frames_f32raw(const fs::path& path) {
  const auto meta = parse_json_text(
      core::read_file_text(path.string() + ".meta.json"),
      "frame sidecar for " + path.string());
  if (!meta.contains("shape") || !meta.contains("dtype"))
    throw FormatError("frame sidecar missing fields: " + path.string());
  if (meta.at("dtype").get<std::string>() != "float32")
    throw FormatError("frame blob is not float32: " + path.string());
  core::Shape shape = meta.at("shape").get<core::Shape>();
  const long numel = core::numel_of(shape);
  const auto bytes = core::read_file_bytes(path);
  if (bytes.size() != static_cast<size_t>(numel) * sizeof(float))
    throw FormatError("frame blob size mismatch for " + path.string() +
                      " (expected " + std::to_string(numel * sizeof(float)) +
                      " bytes, got " + std::to_string(bytes.size()) + ")");
  core::Tensor<float> t(shape);
  std::memcpy(t.data(), bytes.data(), bytes.size());
  return t;
}

void save_manifest(const Manifest& m, const fs::path& json_path) {
  njson recs = njson::array();
  for (const auto& r : m.records) {
    recs.push_back(njson{{"sample_id", r.sample_id},
                         {"word_id", r.word_id},
                         {"person_id", r.person_id},
                         {"frames_path", r.frames_path},
                         {"frames_format", r.frames_format},
                         {"audio_path", r.audio_path},
                         {"openness_truth", r.openness_truth}});
  }
  njson doc{{"format", kManifestFormat},
            {"split", m.split},
            {"toy_config", toy_to_json_obj(m.toy)},
            {"records", recs}};
  core::write_file_atomic(json_path, doc.dump(2) + "\n");
}

Manifest load_manifest(const fs::path& json_path) {
  const auto doc =
      parse_json_text(core::read_file_text(json_path), json_path.string());
  if (!doc.is_object() || !doc.contains("format") ||
      doc.at("format").get<std::string>() != kManifestFormat)
    throw FormatError("not a toy manifest: " + json_path.string());
  Manifest m;
  m.dir = json_path.has_parent_path() ? json_path.parent_path() : fs::path(".");
  m.split = doc.at("split").get<std::string>();
  m.toy = toy_from_json_obj(doc.at("toy_config"));
  for (const auto& r : doc.at("records")) {
    ManifestRecord rec;
    rec.sample_id = r.at("sample_id").get<std::string>();
    rec.word_id = r.at("word_id").get<long>();
    rec.person_id = r.at("person_id").get<long>();
    rec.frames_path = r.at("frames_path").get<std::string>();
    rec.frames_format = r.at("frames_format").get<std::string>();
    rec.audio_path = r.at("audio_path").get<std::string>();
    rec.openness_truth = r.at("openness_truth").get<std::vector<double>>();
    m.records.push_back(std::move(rec));
  }
  return m;
}

SampleRecord load_record(const Manifest& m, long index) {
  DAVS_CHECK(index >= 0 && index < static_cast<long>(m.records.size()),
             "record index out of range");
  const ManifestRecord& rec = m.records[static_cast<size_t>(index)];
  SampleRecord out;
  out.meta = rec;
  const fs::path frames_path = m.dir / rec.frames_path;
  if (rec.frames_format == "f32raw") {
    out.frames = read_frames_f32raw(frames_path);
  } else if (rec.frames_format == "png") {
    const long t_count = static_cast<long>(rec.openness_truth.size());
    core::Tensor<float> frames;
    for (long t = 0; t < t_count; ++t) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "frame_%03ld.png", t);
      core::Tensor<float> f = read_png_rgb8(frames_path / buf);
      if (t == 0)
        frames = core::Tensor<float>({t_count, f.dim(0), f.dim(1), 3});
      std::copy_n(f.data(), f.numel(), frames.data() + t * f.numel());
    }
    out.frames = std::move(frames);
  } else {
    throw FormatError("unknown frames_format: " + rec.frames_format);
  }
  out.audio = read_wav_pcm16(m.dir / rec.audio_path).samples;
  return out;
}

std::vector<fs::path> generate_toy_dataset(const ToyWorldConfig& cfg,
                                           const fs::path& out_dir) {
  cfg.validate();
  const struct {
    const char* name;
    long count;
  } splits[] = {{"train", cfg.counts.train},
                {"val", cfg.counts.val},
                {"test", cfg.counts.test}};

  std::vector<fs::path> manifests;
  for (const auto& split : splits) {
    const fs::path dir = out_dir / split.name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw StorageError("cannot create " + dir.string());

    Manifest m;
    m.dir = dir;
    m.split = split.name;
    m.toy = cfg;
    for (long i = 0; i < split.count; ++i) {
      core::Rng rng_s = core::Rng(cfg.seed).child(
          std::string(split.name) + "-sample", static_cast<std::uint64_t>(i));
      ManifestRecord rec;
      rec.sample_id = sample_name(split.name, i);
      rec.word_id = static_cast<long>(rng_s.uniform_int(cfg.n_words));
      rec.person_id = static_cast<long>(rng_s.uniform_int(cfg.n_persons));
      const std::uint64_t instance_seed = rng_s.next_u64();
      rec.openness_truth = word_trajectory(rec.word_id, cfg, instance_seed);
      rec.frames_format = cfg.frames_format;
      rec.audio_path = rec.sample_id + ".wav";

      const IdentityParams id = identity_params(rec.person_id, cfg);
      core::Rng noise_rng = rng_s.child("render-noise");
      const long hs = cfg.frame_size;
      core::Tensor<float> frames({cfg.frames_per_clip, hs, hs, 3});
      for (long t = 0; t < cfg.frames_per_clip; ++t) {
        core::Tensor<float> f =
            render_toy_frame(id, rec.openness_truth[t], cfg, noise_rng);
        std::copy_n(f.data(), f.numel(), frames.data() + t * f.numel());
      }
      if (cfg.frames_format == "f32raw") {
        rec.frames_path = rec.sample_id + ".f32raw";
        write_frames_f32raw(dir / rec.frames_path, frames);
      } else {
        rec.frames_path = rec.sample_id;
        fs::create_directories(dir / rec.frames_path, ec);
        if (ec) throw StorageError("cannot create " + (dir / rec.frames_path).string());
        for (long t = 0; t < cfg.frames_per_clip; ++t) {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "frame_%03ld.png", t);
          core::Tensor<float> one({hs, hs, 3});
          std::copy_n(frames.data() + t * one.numel(), one.numel(), one.data());
          write_png_rgb8(dir / rec.frames_path / buf, one);
        }
      }
      write_wav_pcm16(dir / rec.audio_path,
                      synth_audio(rec.openness_truth, cfg),
                      cfg.audio_sample_rate);
      m.records.push_back(std::move(rec));
    }
    const fs::path manifest_path = dir / "manifest.json";
    save_manifest(m, manifest_path);
    manifests.push_back(manifest_path);
  }
  return manifests;
}

std::vector<Batch> iterate_batches(const Manifest& m, long batch_size,
                                   std::uint64_t seed, BatchMode mode) {
  DAVS_CHECK(batch_size >= 1, "batch_size must be >= 1");
  const long n = static_cast<long>(m.records.size());
  std::vector<long> order(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  if (mode == BatchMode::kTrain) {
    core::Rng rng = core::Rng(seed).child("shuffle");
    for (long i = n - 1; i > 0; --i) {
      const long j = static_cast<long>(rng.uniform_int(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
  }
  std::vector<Batch> out;
  for (long start = 0; start < n; start += batch_size) {
    const long end = std::min(n, start + batch_size);
    const long b = end - start;
    if (mode == BatchMode::kTrain && b < batch_size) break;
    Batch batch;
    batch.indices.assign(order.begin() + start, order.begin() + end);
    batch.pairing = core::Tensor<float>({b, b});
    for (long i = 0; i < b; ++i) batch.pairing.at(i, i) = 1.0f;
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace davs::avdata
