// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

void Dataset::validate() const {
  MOELAB_REQUIRE(images.rank() == 4, "dataset images must be (n, C, H, W)");
  MOELAB_REQUIRE(images.dim(0) == size(), "dataset image/label count mismatch");
  MOELAB_REQUIRE(num_classes >= 2, "dataset needs at least two classes");
  for (int y : labels) MOELAB_REQUIRE(y >= 0 && y < num_classes, "dataset label out of range");
  for (float v : images.data()) MOELAB_REQUIRE(v >= 0.0f && v <= 1.0f, "dataset pixel outside [0, 1]");
}

Tensor<float> Dataset::gather_images(std::span<const int> indices) const {
  const std::int64_t per = images.size() / std::max(1, size());
  Shape s = images.shape();
  s[0] = static_cast<int>(indices.size());
  Tensor<float> out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    MOELAB_REQUIRE(indices[i] >= 0 && indices[i] < size(), "dataset index out of range");
    std::copy_n(images.ptr() + indices[i] * per, per, out.ptr() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset Dataset::slice(int begin, int end) const {
  MOELAB_REQUIRE(0 <= begin && begin <= end && end <= size(), "dataset slice out of range");
  std::vector<int> idx(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) idx[static_cast<std::size_t>(i - begin)] = i;
  return Dataset{gather_images(idx), gather_labels(idx), num_classes, split};
}

// ---------------------------------------------------------------------------

Tensor<float> synthetic_template(const SyntheticConfig& cfg, int c) {
  MOELAB_REQUIRE(cfg.height >= 8 && cfg.width >= 8, "synthetic images need H, W >= 8");
  MOELAB_REQUIRE(c >= 0 && c < cfg.num_classes, "synthetic class out of range");
  RngStream rng = RngStream(cfg.seed, "synthetic").child("template").child(static_cast<std::uint64_t>(c));
  constexpr int kWaves = 4;
  const double two_pi = 2.0 * std::numbers::pi;
  Tensor<float> t(Shape{cfg.channels, cfg.height, cfg.width});
  for (int ch = 0; ch < cfg.channels; ++ch) {
    double fy[kWaves], fx[kWaves], phase[kWaves], amp[kWaves];
    double norm = 0.0;
    for (int k = 0; k < kWaves; ++k) {
      fy[k] = static_cast<double>(rng.next_u64() % 3);
      fx[k] = static_cast<double>(rng.next_u64() % 3);
      if (fx[k] == 0.0 && fy[k] == 0.0) fx[k] = 1.0;
      phase[k] = rng.uniform(0.0, two_pi);
      amp[k] = rng.uniform(0.5, 1.0);
      norm += amp[k];
    }
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        double v = 0.0;
        for (int k = 0; k < kWaves; ++k)
          v += amp[k] * std::cos(two_pi * (fy[k] * y / cfg.height + fx[k] * x / cfg.width) + phase[k]);
        t[(static_cast<std::int64_t>(ch) * cfg.height + y) * cfg.width + x] =
            static_cast<float>(std::clamp(0.5 + cfg.amplitude * v / norm, 0.0, 1.0));
      }
  }
  return t;
}

Dataset gen_synthetic(const SyntheticConfig& cfg) {
  MOELAB_REQUIRE(cfg.num_classes >= 2 && cfg.n_per_class >= 1 && cfg.channels >= 1, "synthetic config out of range");
  MOELAB_REQUIRE(cfg.noise_sigma >= 0.0, "noise_sigma must be >= 0");
  std::vector<Tensor<float>> templates;
  for (int c = 0; c < cfg.num_classes; ++c) templates.push_back(synthetic_template(cfg, c));
  const int n = cfg.num_classes * cfg.n_per_class;
  const std::int64_t per = templates[0].size();
  Dataset d{Tensor<float>(Shape{n, cfg.channels, cfg.height, cfg.width}), std::vector<int>(static_cast<std::size_t>(n)),
            cfg.num_classes, cfg.split};
  RngStream noise = RngStream(cfg.seed, "synthetic").child("noise").child(cfg.split);
  for (int i = 0; i < n; ++i) {
    const int c = i % cfg.num_classes;
    d.labels[static_cast<std::size_t>(i)] = c;
    float* dst = d.images.ptr() + static_cast<std::int64_t>(i) * per;
    for (std::int64_t j = 0; j < per; ++j) {
      const double v = templates[static_cast<std::size_t>(c)][j] + (cfg.noise_sigma > 0.0 ? cfg.noise_sigma * noise.normal() : 0.0);
      dst[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

Dataset load_cifar10_binary(const std::string& path, int max_records, const std::string& split) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open CIFAR-10 file '" + path + "'");
  f.seekg(0, std::ios::end);
  const std::int64_t bytes = f.tellg();
  f.seekg(0);
  if (bytes % kCifarRecordBytes != 0)
    throw FormatError("'" + path + "': truncated record at byte offset " +
                      std::to_string(bytes - bytes % kCifarRecordBytes) + " (file length " + std::to_string(bytes) +
                      " is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  std::int64_t n = bytes / kCifarRecordBytes;
  if (max_records > 0) n = std::min<std::int64_t>(n, max_records);
  Dataset d{Tensor<float>(Shape{static_cast<int>(n), 3, 32, 32}), std::vector<int>(static_cast<std::size_t>(n)), 10, split};
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (std::int64_t i = 0; i < n; ++i) {
    f.read(reinterpret_cast<char*>(rec.data()), kCifarRecordBytes);
    if (!f) throw FormatError("'" + path + "': short read at byte offset " + std::to_string(i * kCifarRecordBytes));
    if (rec[0] > 9)
      throw FormatError("'" + path + "': label " + std::to_string(rec[0]) + " > 9 at byte offset " +
                        std::to_string(i * kCifarRecordBytes));
    d.labels[static_cast<std::size_t>(i)] = rec[0];
    float* dst = d.images.ptr() + i * 3072;
    for (int j = 0; j < 3072; ++j) dst[j] = static_cast<float>(rec[static_cast<std::size_t>(j + 1)]) / 255.0f;
  }
  return d;
}

void write_cifar10_binary(const std::string& path, const Dataset& data) {
  MOELAB_REQUIRE(data.images.rank() == 4 && data.channels() == 3 && data.height() == 32 && data.width() == 32,
                 "CIFAR-10 records are 3x32x32");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (int i = 0; i < data.size(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    MOELAB_REQUIRE(y >= 0 && y <= 9, "CIFAR-10 label out of range");
    rec[0] = static_cast<unsigned char>(y);
    const float* src = data.images.ptr() + static_cast<std::int64_t>(i) * 3072;
    for (int j = 0; j < 3072; ++j)
      rec[static_cast<std::size_t>(j + 1)] =
          static_cast<unsigned char>(std::lround(std::clamp(src[j], 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(rec.data()), kCifarRecordBytes);
  }
  if (!f) throw FormatError("short write to '" + path + "'");
}

}  // namespace moelab
