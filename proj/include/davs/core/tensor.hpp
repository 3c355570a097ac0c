// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "davs/core/error.hpp"

namespace davs::core {

using Shape = std::vector<long>;

inline long numel_of(const Shape& s) {
  long n = 1;
  for (long d : s) {
    DAVS_CHECK(d >= 0, "tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major (C order) tensor. Plain value type: copies copy the data.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

  Tensor(std::initializer_list<long> shape, T fill = T(0))
      : Tensor(Shape(shape), fill) {}

  static Tensor from(Shape shape, std::vector<T> data) {
    Tensor t;
    DAVS_CHECK(numel_of(shape) == static_cast<long>(data.size()),
               "tensor data size does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  const Shape& shape() const { return shape_; }
  long dim(size_t i) const {
    DAVS_CHECK(i < shape_.size(), "tensor dim index out of range");
    return shape_[i];
  }
  size_t ndim() const { return shape_.size(); }
  long numel() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  T& at(long i, long j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  const T& at(long i, long j) const {
    return data_[static_cast<size_t>(i * dim(1) + j)];
  }

  // Returns a copy with a new shape; element count must match.
  Tensor reshaped(Shape shape) const {
    DAVS_CHECK(numel_of(shape) == numel(),
               "reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                   " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    return Tensor<U>::from(shape_, std::move(d));
  }

 private:
  Shape shape_;
  std::vector<T> data_;

  template <typename U>
  friend class Tensor;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape());
}

}  // namespace davs::core
