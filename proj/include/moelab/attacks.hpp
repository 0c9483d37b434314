// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// l-infinity PGD with sign steps. Perturbations live in input units; the
// valid input range is [0, 1].

#pragma once

#include <functional>
#include <span>
#include <string>
#include <type_traits>

#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

enum class AttackObjective { ce, kl };
enum class AttackInit { zero, uniform, small_gauss };

std::string to_string(AttackObjective o);
std::string to_string(AttackInit i);
AttackObjective parse_attack_objective(const std::string& s);
AttackInit parse_attack_init(const std::string& s);

/// 2.5 * eps / K, raised to eps / 4 when K <= 2.
double default_step_size(double epsilon, int steps);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  int steps = 2;
  double step_size = 0.0;  // 0 selects default_step_size
  AttackObjective objective = AttackObjective::ce;
  AttackInit init = AttackInit::uniform;
  double gauss_sigma = 1e-3;

  void validate() const;
  double alpha() const { return step_size > 0.0 ? step_size : default_step_size(epsilon, steps); }
};

/// Clamp delta to [-eps, eps], then clamp x + delta to [0, 1]. The result is
/// exact in double arithmetic: |delta| <= eps and 0 <= x + delta <= 1 hold for
/// the stored float values, not just up to rounding.
template <typename T>
void project_linf(Tensor<T>& delta, double epsilon, const Tensor<T>& x);

template <typename T>
using LogitFn = std::function<Var<T>(Tape<T>&, Var<T> input)>;

/// Returns delta. `reference_logits` (clean logits, constant) is required for
/// the KL objective. `rng` drives the initialization only.
template <typename T>
Tensor<T> pgd(const LogitFn<T>& f, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
              std::type_identity_t<const Tensor<T>*> reference_logits, RngStream& rng);

/// PGD against a model evaluated with `opt` (hard routing by default). Weight
/// gradients are never requested and the model is not modified.
template <typename T>
Tensor<T> pgd(const Model<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
              std::type_identity_t<const Tensor<T>*> reference_logits, RngStream& rng, ForwardOptions<T> opt = {});

}  // namespace moelab
