// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace davs::core {

// splitmix64: used to expand seeds and to hash stream labels. Stable across
// platforms; every deterministic artifact in the project bottoms out here.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_label(std::string_view label) {
  // FNV-1a 64, then one splitmix round for avalanche.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  std::uint64_t s = h;
  return splitmix64(s);
}

// xoshiro256++ with helpers for the distributions the project needs.
// Child streams are derived from (state, label, index) so independent
// consumers never share a stream and insertion order of draws elsewhere
// cannot perturb them.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0. Uses rejection to stay unbiased.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller. Draws two uniforms per call (no caching,
  // keeps the stream position a pure function of the call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Deterministic child stream keyed on the parent's construction seed, not
  // its current position: same (label, index) always yields the same stream
  // regardless of how many draws the parent has made.
  Rng child(std::string_view label, std::uint64_t index = 0) const {
    std::uint64_t sm = seed_ ^ hash_label(label);
    sm = splitmix64(sm);
    sm ^= index * 0x9E3779B97F4A7C15ULL;
    return Rng(splitmix64(sm));
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_ = 0;
  std::uint64_t s_[4]{};
};

// Convenience for deriving a child straight from a root seed.
inline Rng seeded_stream(std::uint64_t seed, std::string_view label,
                         std::uint64_t index = 0) {
  return Rng(seed).child(label, index);
}

}  // namespace davs::core
