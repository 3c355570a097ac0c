// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/avdata/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"

namespace davs::avdata {

void write_wav_pcm16(const std::filesystem::path& path,
                     const std::vector<double>& samples, long sample_rate) {
  DAVS_CHECK(sample_rate > 0, "write_wav_pcm16: bad sample rate");
  const std::uint32_t data_bytes =
      static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  tag("RIFF");
  core::append_le<std::uint32_t>(out, 36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  core::append_le<std::uint32_t>(out, 16);
  core::append_le<std::uint16_t>(out, 1);  // PCM
  core::append_le<std::uint16_t>(out, 1);  // mono
  core::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate));
  core::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate * 2));
  core::append_le<std::uint16_t>(out, 2);   // block align
  core::append_le<std::uint16_t>(out, 16);  // bits per sample
  tag("data");
  core::append_le<std::uint32_t>(out, data_bytes);
  for (double v : samples) {
    const double c = std::clamp(v, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(
        std::clamp<long>(std::lround(c * 32767.0), -32768, 32767));
    core::append_le<std::int16_t>(out, q);
  }
  core::write_file_atomic(path, out.data(), out.size());
}

WavData read_wav_pcm16(const std::filesystem::path& path) {
  const auto bytes = core::read_file_bytes(path);
  core::ByteReader r(bytes, "wav file " + path.string());
  if (r.take_string(4) != "RIFF") throw FormatError("not a RIFF file: " + path.string());
  (void)r.take<std::uint32_t>();
  if (r.take_string(4) != "WAVE") throw FormatError("not a WAVE file: " + path.string());

  WavData out;
  bool got_fmt = false;
  while (r.remaining() >= 8) {
    const std::string chunk = r.take_string(4);
    const auto size = r.take<std::uint32_t>();
    if (chunk == "fmt ") {
      if (size < 16) throw FormatError("wav fmt chunk too small");
      const auto codec = r.take<std::uint16_t>();
      const auto channels = r.take<std::uint16_t>();
      const auto rate = r.take<std::uint32_t>();
      (void)r.take<std::uint32_t>();
      (void)r.take<std::uint16_t>();
      const auto bits = r.take<std::uint16_t>();
      if (codec != 1) throw FormatError("wav is not linear PCM");
      if (channels != 1) throw FormatError("wav is not mono");
      if (bits != 16) throw FormatError("wav is not 16-bit");
      out.sample_rate = rate;
      got_fmt = true;
      for (std::uint32_t i = 16; i < size; ++i) (void)r.take<std::uint8_t>();
    } else if (chunk == "data") {
      if (!got_fmt) throw FormatError("wav data chunk before fmt");
      if (size % 2 != 0) throw FormatError("wav data chunk has odd size");
      const size_t n = size / 2;
      out.samples.resize(n);
      for (size_t i = 0; i < n; ++i)
        out.samples[i] =
            static_cast<float>(r.take<std::int16_t>()) / 32767.0f;
      return out;
    } else {
      for (std::uint32_t i = 0; i < size; ++i) (void)r.take<std::uint8_t>();
    }
  }
  throw FormatError("wav file has no data chunk: " + path.string());
}

}  // namespace davs::avdata
