// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/avdata/image_png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <vector>

#include "davs/core/error.hpp"
#include "davs/core/io_util.hpp"

namespace davs::avdata {

namespace {

void png_error_fn(png_structp png, png_const_charp msg) {
  (void)msg;
  longjmp(png_jmpbuf(png), 1);
}

void png_warn_fn(png_structp, png_const_charp) {}

struct VecSink {
  std::vector<std::uint8_t> bytes;
};

void png_write_to_vec(png_structp png, png_bytep data, png_size_t len) {
  auto* sink = static_cast<VecSink*>(png_get_io_ptr(png));
  sink->bytes.insert(sink->bytes.end(), data, data + len);
}

void png_flush_noop(png_structp) {}

struct VecSource {
  const std::uint8_t* data;
  size_t size;
  size_t pos;
};

void png_read_from_vec(png_structp png, png_bytep out, png_size_t len) {
  auto* src = static_cast<VecSource*>(png_get_io_ptr(png));
  if (src->pos + len > src->size) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, src->data + src->pos, len);
  src->pos += len;
}

}  // namespace

void write_png_rgb8(const std::filesystem::path& path,
                    const core::Tensor<float>& hwc) {
  DAVS_CHECK(hwc.ndim() == 3 && hwc.dim(2) == 3,
             "write_png_rgb8 expects an (H, W, 3) tensor");
  const long h = hwc.dim(0), w = hwc.dim(1);
  std::vector<std::uint8_t> pixels(static_cast<size_t>(h) * w * 3);
  for (long i = 0; i < h * w * 3; ++i) {
    const float v = std::clamp(hwc[i], 0.0f, 1.0f);
    pixels[static_cast<size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            png_error_fn, png_warn_fn);
  if (!png) throw StorageError("libpng: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw StorageError("libpng: cannot create info struct");
  }
  VecSink sink;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw StorageError("libpng: write failed for " + path.string());
  }
  png_set_write_fn(png, &sink, png_write_to_vec, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (long i = 0; i < h; ++i)
    rows[static_cast<size_t>(i)] = pixels.data() + static_cast<size_t>(i) * w * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);

  core::write_file_atomic(path, sink.bytes.data(), sink.bytes.size());
}

core::Tensor<float> read_png_rgb8(const std::filesystem::path& path) {
  const auto bytes = core::read_file_bytes(path);
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    throw FormatError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           png_error_fn, png_warn_fn);
  if (!png) throw StorageError("libpng: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw StorageError("libpng: cannot create info struct");
  }
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG file: " + path.string());
  }
  VecSource src{bytes.data(), bytes.size(), 0};
  png_set_read_fn(png, &src, png_read_from_vec);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const long w = png_get_image_width(png, info);
  const long h = png_get_image_height(png, info);
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG did not decode to RGB: " + path.string());
  }
  pixels.resize(static_cast<size_t>(h) * w * 3);
  rows.resize(static_cast<size_t>(h));
  for (long i = 0; i < h; ++i)
    rows[static_cast<size_t>(i)] = pixels.data() + static_cast<size_t>(i) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  core::Tensor<float> out({h, w, 3});
  for (long i = 0; i < h * w * 3; ++i)
    out[i] = static_cast<float>(pixels[static_cast<size_t>(i)]) / 255.0f;
  return out;
}

}  // namespace davs::avdata
