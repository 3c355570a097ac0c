// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "davs/core/error.hpp"

namespace davs::core {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts would need "
              "byte swapping");

// Writes bytes to a sibling temp file, then renames into place. A crashed
// writer never leaves a half-written artifact under the final name.
inline void write_file_atomic(const std::filesystem::path& path,
                              const void* data, size_t size) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open for write: " + tmp.string());
    if (size > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw StorageError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw StorageError("rename failed for " + path.string());
  }
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline std::vector<std::uint8_t> read_file_bytes(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw StorageError("cannot open for read: " + path.string());
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw StorageError("read failed: " + path.string());
  return bytes;
}

inline std::string read_file_text(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

// Little-endian scalar append helpers for hand-rolled binary formats.
template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* p) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

// Bounds-checked cursor over a byte buffer; truncated input raises
// FormatError instead of reading garbage.
class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, size_t size, std::string what)
      : data_(data), size_(size), what_(std::move(what)) {}

  explicit ByteReader(const std::vector<std::uint8_t>& bytes, std::string what)
      : ByteReader(bytes.data(), bytes.size(), std::move(what)) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    T v = read_le<T>(data_ + pos_);
    pos_ += sizeof(T);
    return v;
  }

  void take_bytes(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }

  std::string take_string(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  size_t remaining() const { return size_ - pos_; }
  bool done() const { return pos_ == size_; }

 private:
  void need(size_t n) const {
    if (size_ - pos_ < n)
      throw FormatError("truncated or corrupt " + what_ + " (wanted " +
                        std::to_string(n) + " bytes, have " +
                        std::to_string(size_ - pos_) + ")");
  }

  const std::uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  std::string what_;
};

}  // namespace davs::core
