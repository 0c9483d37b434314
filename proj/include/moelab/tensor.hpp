// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape);

/// Dense row-major array. Value type; copying copies the storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    for (int d : shape_) MOELAB_REQUIRE(d > 0, "tensor dimensions must be positive, got " + shape_str(shape_));
    values_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    for (int d : shape_) MOELAB_REQUIRE(d > 0, "tensor dimensions must be positive, got " + shape_str(shape_));
    MOELAB_REQUIRE(shape_numel(shape_) == static_cast<std::int64_t>(values_.size()),
                   "value count does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(values_.size()); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> data() noexcept { return values_; }
  std::span<const T> data() const noexcept { return values_; }
  T* ptr() noexcept { return values_.data(); }
  const T* ptr() const noexcept { return values_.data(); }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }

  T item() const {
    MOELAB_REQUIRE(values_.size() == 1, "item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor reshaped(Shape shape) const {
    MOELAB_REQUIRE(shape_numel(shape) == size(), "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), values_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
};

/// FNV-1a over the raw bytes of the values; used for bit-identity assertions.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
  for (std::size_t i = 0; i < t.storage().size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace moelab
