// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace moelab {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// FNV-1a; stable across platforms and runs (unlike std::hash).
constexpr std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view stream_id) {
  return mix64(master_seed ^ mix64(stable_hash(stream_id)));
}

/// Uniform in [0,1) with 53 random bits.
inline double bits_to_unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

/// Standard normal value addressed by (key, index); no generator state involved.
double counter_normal(std::uint64_t key, std::uint64_t index);

/// A named, reproducible random stream. State is a pure function of
/// (master_seed, stream_id); `child` derives nested streams the same way.
/// Distribution transforms are implemented here rather than via <random>
/// distributions, whose output is implementation-defined.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::string_view stream_id)
      : master_seed_(master_seed), stream_id_(stream_id), engine_(derive_seed(master_seed, stream_id)) {}

  std::uint64_t master_seed() const noexcept { return master_seed_; }
  const std::string& stream_id() const noexcept { return stream_id_; }

  RngStream child(std::string_view label) const {
    return RngStream(derive_seed(master_seed_, stream_id_), label);
  }
  RngStream child(std::uint64_t index) const { return child(std::to_string(index)); }

  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return bits_to_unit(engine_()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Fisher-Yates permutation of [0, n).
  std::vector<int> permutation(int n);

 private:
  std::uint64_t master_seed_;
  std::string stream_id_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace moelab
