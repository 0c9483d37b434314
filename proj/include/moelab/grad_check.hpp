// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"

namespace moelab {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int coordinates = 0;
  bool pass = false;
  std::string worst;  // "tensor[index]" of the largest error
};

struct GradCheckOptions {
  double tolerance = 1e-5;
  double step = 1e-5;             // central-difference h
  int min_coordinates = 50;       // sampled across all tensors, at least one per tensor
  double denominator_floor = 1e-6;
  std::uint64_t seed = 0;
  /// Applied to the analytic gradients before comparison (negative controls).
  std::function<void(std::vector<Tensor<double>>&)> corrupt;
};

/// Builds the scalar loss on a fresh tape from one Var per parameter tensor.
using LossClosure = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Compares backward() against central finite differences on a seeded
/// coordinate subsample. Relative error is |a - n| / max(|a|, |n|, floor).
/// Failures are reported, never thrown.
GradCheckReport grad_check(const LossClosure& loss, std::span<Tensor<double>* const> params,
                           const GradCheckOptions& opt);

}  // namespace moelab
