// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/optim.hpp"

#include <cmath>
#include <numbers>

#include "moelab/rng.hpp"

namespace moelab {

template <typename T>
std::uint64_t ParamGroup<T>::checksum() const {
  std::uint64_t h = stable_hash(name);
  for (const auto& p : params) h = mix64(h ^ moelab::checksum(p.value));
  return h;
}

template <typename T>
void sgd_step(ParamGroup<T>& group, std::span<const Tensor<T>> grads, const SgdOptions& opt) {
  MOELAB_REQUIRE(!group.frozen, "sgd_step on frozen group '" + group.name + "'");
  MOELAB_REQUIRE(grads.size() == group.params.size(),
                 "sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(group.params.size()) + " parameters in '" + group.name + "'");
  const T lr = static_cast<T>(opt.lr);
  const T mom = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Parameter<T>& p = group.params[i];
    MOELAB_REQUIRE(grads[i].shape() == p.value.shape(),
                   "sgd_step: gradient shape " + shape_str(grads[i].shape()) + " does not match " + p.name + " " +
                       shape_str(p.value.shape()));
    if (p.velocity.empty()) p.velocity = Tensor<T>(p.value.shape());
    T* v = p.velocity.ptr();
    T* w = p.value.ptr();
    const T* g = grads[i].ptr();
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      v[j] = mom * v[j] + (g[j] + wd * w[j]);
      w[j] -= lr * v[j];
    }
  }
}

double cosine_lr(int epoch, int total_epochs, double lr0) {
  MOELAB_REQUIRE(total_epochs > 0, "cosine_lr: total_epochs must be positive");
  MOELAB_REQUIRE(epoch >= 0 && epoch < total_epochs, "cosine_lr: epoch out of range");
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

template struct ParamGroup<float>;
template struct ParamGroup<double>;
template void sgd_step(ParamGroup<float>&, std::span<const Tensor<float>>, const SgdOptions&);
template void sgd_step(ParamGroup<double>&, std::span<const Tensor<double>>, const SgdOptions&);

}  // namespace moelab
