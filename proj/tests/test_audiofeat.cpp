// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "davs/audiofeat/mfcc.hpp"
#include "davs/avdata/dataset.hpp"
#include "davs/avdata/toyworld.hpp"
#include "davs/core/io_util.hpp"
#include "doctest.h"

using namespace davs;
using namespace davs::audiofeat;

namespace {

std::vector<float> sine_wave(double freq, double amp, double seconds,
                             long sr) {
  std::vector<float> w(static_cast<size_t>(seconds * sr));
  for (size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<float>(
        amp * std::sin(2.0 * 3.14159265358979323846 * freq * i / sr));
  return w;
}

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (i + j) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const size_t n = a.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < n; ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("mfcc output shapes match the pinned framing policy") {
  MfccConfig cfg;
  auto w = sine_wave(440.0, 0.5, 1.0, 8000);
  auto seq = mfcc(w, cfg);
  CHECK(seq.coeffs.shape() == core::Shape{100, 12});
  CHECK(seq.hop_seconds == 0.010);

  w = sine_wave(440.0, 0.5, 0.64, 8000);
  seq = mfcc(w, cfg);
  CHECK(seq.coeffs.shape() == core::Shape{64, 12});
}

TEST_CASE("mfcc domain errors") {
  MfccConfig cfg;
  CHECK_THROWS_AS(mfcc(std::vector<float>(100, 0.1f), cfg), DomainError);
  auto bad = cfg;
  bad.sample_rate = 2000;
  CHECK_THROWS_AS(mfcc(std::vector<float>(4000, 0.1f), bad), DomainError);
}

TEST_CASE("all-zero waveform yields constant finite frames with zero ceps") {
  MfccConfig cfg;
  const auto seq = mfcc(std::vector<float>(8000, 0.0f), cfg);
  REQUIRE(seq.coeffs.shape() == core::Shape{100, 12});
  for (long f = 0; f < seq.frames(); ++f)
    for (long c = 0; c < 12; ++c) {
      const double v = seq.coeffs.at(f, c);
      CHECK(std::isfinite(v));
      // log energies are constant at the floor, so every non-c0 DCT
      // coefficient vanishes.
      CHECK(std::abs(v) < 1e-9);
      CHECK(v == seq.coeffs.at(0, c));
    }
}

TEST_CASE("mfcc matches the independent reference within 1e-4") {
  const auto bytes = core::read_file_bytes(
      std::string(DAVS_TEST_DATA_DIR) + "/mfcc_reference.bin");
  core::ByteReader r(bytes, "mfcc reference data");
  char magic[8];
  r.take_bytes(magic, 8);
  REQUIRE(std::string(magic, 8) == "DAVSMFC1");
  const auto count = r.take<std::uint32_t>();
  REQUIRE(count == 100);

  MfccConfig cfg;
  double max_err = 0.0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto sr = r.take<std::uint32_t>();
    const auto n = r.take<std::uint32_t>();
    const auto frames = r.take<std::uint32_t>();
    std::vector<float> wave(n);
    r.take_bytes(wave.data(), n * sizeof(float));
    std::vector<double> ref(static_cast<size_t>(frames) * 12);
    r.take_bytes(ref.data(), ref.size() * sizeof(double));

    cfg.sample_rate = sr;
    const auto seq = mfcc(wave, cfg);
    REQUIRE(seq.coeffs.shape() == core::Shape{static_cast<long>(frames), 12});
    for (size_t k = 0; k < ref.size(); ++k)
      max_err = std::max(max_err, std::abs(seq.coeffs[k] - ref[k]));
  }
  CHECK(r.done());
  CHECK(max_err < 1e-4);
}

TEST_CASE("align_block centers, overlap and edge replication") {
  MfccConfig cfg;
  const auto seq = sine_wave(300.0, 0.4, 0.64, 8000);
  const auto m = mfcc(seq, cfg);  // 64 x 12

  // Frame 8 at 25 fps: t = 0.34 s, center row 34, rows [24, 44).
  const auto block = align_block(m, 8, 25);
  REQUIRE(block.shape() == core::Shape{12, 20});
  for (long j = 0; j < 20; ++j)
    for (long c = 0; c < 12; ++c)
      CHECK(block.at(c, j) == m.coeffs.at(24 + j, c));

  // Consecutive video frames at 25 fps share 16 of 20 columns.
  const auto next = align_block(m, 9, 25);
  for (long j = 0; j < 16; ++j)
    for (long c = 0; c < 12; ++c)
      CHECK(next.at(c, j) == block.at(c, j + 4));

  // Frame 0: center 2, rows [-8, 12) replicate row 0.
  const auto edge = align_block(m, 0, 25);
  for (long j = 0; j < 8; ++j)
    for (long c = 0; c < 12; ++c)
      CHECK(edge.at(c, j) == m.coeffs.at(0, c));

  // Far past the end: all rows clamp to the last.
  const auto tail = align_block(m, 1000, 25);
  for (long j = 0; j < 20; ++j)
    for (long c = 0; c < 12; ++c)
      CHECK(tail.at(c, j) == m.coeffs.at(63, c));

  CHECK_THROWS_AS(align_block(m, -1, 25), ContractError);
  CHECK_THROWS_AS(align_block(m, 0, 0), ContractError);
}

TEST_CASE("mean absolute c1 over a frame's block tracks lip openness") {
  // Across a toy test split, the mean |c1| over each video frame's aligned
  // MFCC block must rise with that frame's mouth openness.
  avdata::ToyWorldConfig toy;
  toy.counts = {4, 0, 60};
  toy.seed = 424242;
  const std::string dir =
      std::string(DAVS_TEST_DATA_DIR) + "/tmp_openness_split";
  std::filesystem::remove_all(dir);
  const auto paths = avdata::generate_toy_dataset(toy, dir);
  const auto manifest = avdata::load_manifest(paths[2]);

  MfccConfig cfg;
  cfg.sample_rate = toy.audio_sample_rate;

  std::vector<double> mean_abs_c1;
  std::vector<double> openness;
  for (long i = 0; i < static_cast<long>(manifest.records.size()); ++i) {
    const auto sample = avdata::load_record(manifest, i);
    const auto seq = mfcc(sample.audio, cfg);
    const auto& truth = sample.meta.openness_truth;
    for (long t = 0; t < static_cast<long>(truth.size()); ++t) {
      const auto block = align_block(seq, t, toy.fps);
      double acc = 0.0;
      for (long j = 0; j < block.dim(1); ++j) acc += std::abs(block.at(0, j));
      mean_abs_c1.push_back(acc / static_cast<double>(block.dim(1)));
      openness.push_back(truth[static_cast<size_t>(t)]);
    }
  }
  REQUIRE(mean_abs_c1.size() == static_cast<size_t>(60 * toy.frames_per_clip));
  CHECK(spearman(mean_abs_c1, openness) > 0.5);
  std::filesystem::remove_all(dir);
}

TEST_CASE("mfcc cache returns memoized sequences") {
  MfccCache cache;
  MfccConfig cfg;
  const auto w = sine_wave(200.0, 0.3, 0.5, 8000);
  const auto& a = cache.get_or_compute("k", w, cfg);
  const auto& b = cache.get_or_compute("k", w, cfg);
  CHECK(&a == &b);
  CHECK(cache.size() == 1);
  (void)cache.get_or_compute("k2", w, cfg);
  CHECK(cache.size() == 2);
}
