// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/cli/avi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"

namespace davs::cli {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t((v >> 8) & 0xff));
  out.push_back(std::uint8_t((v >> 16) & 0xff));
  out.push_back(std::uint8_t((v >> 24) & 0xff));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t((v >> 8) & 0xff));
}

void put_tag(std::vector<std::uint8_t>& out, const char tag[4]) {
  out.insert(out.end(), tag, tag + 4);
}

void patch_u32(std::vector<std::uint8_t>& out, size_t pos, std::uint32_t v) {
  out[pos] = std::uint8_t(v & 0xff);
  out[pos + 1] = std::uint8_t((v >> 8) & 0xff);
  out[pos + 2] = std::uint8_t((v >> 16) & 0xff);
  out[pos + 3] = std::uint8_t((v >> 24) & 0xff);
}

std::uint8_t to_byte(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_avi_rgb24(const std::filesystem::path& path,
                     const core::Tensor<float>& frames, long fps) {
  DAVS_CHECK(frames.ndim() == 4 && frames.dim(3) == 3,
             "avi: frames must be (T, H, W, 3)");
  const long t = frames.dim(0), h = frames.dim(1), w = frames.dim(2);
  DAVS_CHECK(t >= 1 && h >= 1 && w >= 1, "avi: empty frame stack");
  DAVS_CHECK(fps >= 1, "avi: fps must be >= 1");

  const std::uint32_t stride = std::uint32_t(((w * 3 + 3) / 4) * 4);
  const std::uint32_t frame_bytes = stride * std::uint32_t(h);

  std::vector<std::uint8_t> out;
  out.reserve(size_t(frame_bytes + 8) * size_t(t) + 512);

  put_tag(out, "RIFF");
  const size_t riff_size_pos = out.size();
  put_u32(out, 0);  // patched at the end
  put_tag(out, "AVI ");

  // hdrl list: one avih plus one video stream (strh + strf).
  put_tag(out, "LIST");
  const size_t hdrl_size_pos = out.size();
  put_u32(out, 0);
  const size_t hdrl_start = out.size();
  put_tag(out, "hdrl");

  put_tag(out, "avih");
  put_u32(out, 56);
  put_u32(out, std::uint32_t(1000000 / fps));  // microseconds per frame
  put_u32(out, frame_bytes * std::uint32_t(fps));  // max bytes per second
  put_u32(out, 0);                                 // padding granularity
  put_u32(out, 0x10);                              // AVIF_HASINDEX
  put_u32(out, std::uint32_t(t));                  // total frames
  put_u32(out, 0);                                 // initial frames
  put_u32(out, 1);                                 // streams
  put_u32(out, frame_bytes);                       // suggested buffer size
  put_u32(out, std::uint32_t(w));
  put_u32(out, std::uint32_t(h));
  for (int i = 0; i < 4; ++i) put_u32(out, 0);  // reserved

  put_tag(out, "LIST");
  const size_t strl_size_pos = out.size();
  put_u32(out, 0);
  const size_t strl_start = out.size();
  put_tag(out, "strl");

  put_tag(out, "strh");
  put_u32(out, 56);
  put_tag(out, "vids");
  put_tag(out, "DIB ");                 // uncompressed device bitmap
  put_u32(out, 0);                      // flags
  put_u16(out, 0);                      // priority
  put_u16(out, 0);                      // language
  put_u32(out, 0);                      // initial frames
  put_u32(out, 1);                      // scale
  put_u32(out, std::uint32_t(fps));     // rate: rate/scale = fps
  put_u32(out, 0);                      // start
  put_u32(out, std::uint32_t(t));       // length in frames
  put_u32(out, frame_bytes);            // suggested buffer size
  put_u32(out, 0xffffffffu);            // quality (default)
  put_u32(out, 0);                      // sample size (varies)
  put_u16(out, 0);                      // rcFrame left
  put_u16(out, 0);                      // top
  put_u16(out, std::uint16_t(w));       // right
  put_u16(out, std::uint16_t(h));       // bottom

  put_tag(out, "strf");
  put_u32(out, 40);                     // BITMAPINFOHEADER
  put_u32(out, 40);
  put_u32(out, std::uint32_t(w));
  put_u32(out, std::uint32_t(h));       // positive: bottom-up rows
  put_u16(out, 1);                      // planes
  put_u16(out, 24);                     // bits per pixel
  put_u32(out, 0);                      // BI_RGB
  put_u32(out, frame_bytes);
  put_u32(out, 0);                      // x pixels per meter
  put_u32(out, 0);                      // y pixels per meter
  put_u32(out, 0);                      // colors used
  put_u32(out, 0);                      // colors important

  patch_u32(out, strl_size_pos, std::uint32_t(out.size() - strl_start));
  patch_u32(out, hdrl_size_pos, std::uint32_t(out.size() - hdrl_start));

  put_tag(out, "LIST");
  const size_t movi_size_pos = out.size();
  put_u32(out, 0);
  const size_t movi_start = out.size();
  put_tag(out, "movi");

  std::vector<std::uint32_t> chunk_offsets;
  chunk_offsets.reserve(size_t(t));
  for (long f = 0; f < t; ++f) {
    chunk_offsets.push_back(std::uint32_t(out.size() - movi_start));
    put_tag(out, "00db");
    put_u32(out, frame_bytes);
    const float* src = frames.data() + f * h * w * 3;
    for (long row = h - 1; row >= 0; --row) {  // bottom-up
      const float* px = src + row * w * 3;
      for (long col = 0; col < w; ++col) {     // BGR order
        out.push_back(to_byte(px[col * 3 + 2]));
        out.push_back(to_byte(px[col * 3 + 1]));
        out.push_back(to_byte(px[col * 3 + 0]));
      }
      for (std::uint32_t pad = std::uint32_t(w * 3); pad < stride; ++pad)
        out.push_back(0);
    }
  }
  patch_u32(out, movi_size_pos, std::uint32_t(out.size() - movi_start));

  put_tag(out, "idx1");
  put_u32(out, std::uint32_t(t) * 16);
  for (long f = 0; f < t; ++f) {
    put_tag(out, "00db");
    put_u32(out, 0x10);  // AVIIF_KEYFRAME
    put_u32(out, chunk_offsets[size_t(f)]);
    put_u32(out, frame_bytes);
  }

  patch_u32(out, riff_size_pos, std::uint32_t(out.size() - riff_size_pos - 4));
  core::write_file_atomic(path, out.data(), out.size());
}

}  // namespace davs::cli
