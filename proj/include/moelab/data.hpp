// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

/// Images (n, C, H, W) with values in [0, 1] and labels in [0, num_classes).
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  int size() const noexcept { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  void validate() const;

  /// Gathers the listed samples into a contiguous batch.
  Tensor<float> gather_images(std::span<const int> indices) const;
  std::vector<int> gather_labels(std::span<const int> indices) const;
  /// Samples [begin, end) in storage order.
  Dataset slice(int begin, int end) const;
};

struct SyntheticConfig {
  int num_classes = 3;
  int n_per_class = 500;
  int channels = 3;
  int height = 16;
  int width = 16;
  double noise_sigma = 0.1;
  double amplitude = 0.1;  // peak deviation of a template from mid-grey
  std::uint64_t seed = 0;
  std::string split = "train";
};

/// Class templates depend only on (seed, class); the noise stream also
/// depends on the split, so train and test never share noise draws.
/// Samples are stored class-interleaved: index i has label i % num_classes.
Dataset gen_synthetic(const SyntheticConfig& cfg);
/// The noiseless template of class `c`, shape (C, H, W).
Tensor<float> synthetic_template(const SyntheticConfig& cfg, int c);

inline constexpr int kCifarRecordBytes = 3073;

/// Reads at most `max_records` records (0 = all). Throws FormatError with the
/// byte offset on a truncated record or a label above 9.
Dataset load_cifar10_binary(const std::string& path, int max_records = 0, const std::string& split = "train");
/// Pixels are written as round(255 * v).
void write_cifar10_binary(const std::string& path, const Dataset& data);

}  // namespace moelab
