// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace moelab {

namespace {

double box_muller(double u1, double u2, double* spare) {
  // u1 in (0,1] keeps log finite.
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  if (spare != nullptr) *spare = radius * std::sin(angle);
  return radius * std::cos(angle);
}

}  // namespace

double counter_normal(std::uint64_t key, std::uint64_t index) {
  const std::uint64_t a = mix64(key ^ mix64(2 * index));
  const std::uint64_t b = mix64(key ^ mix64(2 * index + 1));
  return box_muller(1.0 - bits_to_unit(a), bits_to_unit(b), nullptr);
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  has_spare_ = true;
  return box_muller(u1, u2, &spare_);
}

std::vector<int> RngStream::permutation(int n) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

}  // namespace moelab
