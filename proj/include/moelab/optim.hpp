// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> velocity;  // momentum buffer, allocated on the first step
};

/// Named, ordered parameter set. A model owns exactly two: "routers" and "backbone".
template <typename T>
struct ParamGroup {
  std::string name;
  std::vector<Parameter<T>> params;
  bool frozen = false;

  std::size_t size() const noexcept { return params.size(); }
  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }
  std::uint64_t checksum() const;
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v.
template <typename T>
void sgd_step(ParamGroup<T>& group, std::span<const Tensor<T>> grads, const SgdOptions& opt);

/// 0.5 * lr0 * (1 + cos(pi * epoch / total_epochs)).
double cosine_lr(int epoch, int total_epochs, double lr0);

}  // namespace moelab
