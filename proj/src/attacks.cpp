// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moelab {

std::string to_string(AttackObjective o) { return o == AttackObjective::ce ? "ce" : "kl"; }

std::string to_string(AttackInit i) {
  switch (i) {
    case AttackInit::zero: return "zero";
    case AttackInit::uniform: return "uniform";
    case AttackInit::small_gauss: return "small_gauss";
  }
  return "?";
}

AttackObjective parse_attack_objective(const std::string& s) {
  if (s == "ce") return AttackObjective::ce;
  if (s == "kl") return AttackObjective::kl;
  throw ContractError("attack objective must be 'ce' or 'kl', got '" + s + "'");
}

AttackInit parse_attack_init(const std::string& s) {
  if (s == "zero") return AttackInit::zero;
  if (s == "uniform") return AttackInit::uniform;
  if (s == "small_gauss") return AttackInit::small_gauss;
  throw ContractError("attack init must be zero, uniform or small_gauss, got '" + s + "'");
}

double default_step_size(double epsilon, int steps) {
  if (steps <= 0) return epsilon;
  const double a = 2.5 * epsilon / steps;
  return steps <= 2 ? std::max(a, epsilon / 4.0) : a;
}

void AttackConfig::validate() const {
  MOELAB_REQUIRE(epsilon >= 0.0 && std::isfinite(epsilon), "attack epsilon must be finite and >= 0");
  MOELAB_REQUIRE(steps >= 0, "attack steps must be >= 0");
  MOELAB_REQUIRE(step_size >= 0.0, "attack step size must be >= 0 (0 selects the default)");
  MOELAB_REQUIRE(gauss_sigma >= 0.0, "attack gauss_sigma must be >= 0");
}

namespace {

// Largest T not exceeding v (v >= 0).
template <typename T>
T floor_to(double v) {
  T t = static_cast<T>(v);
  while (static_cast<double>(t) > v) t = std::nextafter(t, T(0));
  return t;
}

}  // namespace

template <typename T>
void project_linf(Tensor<T>& delta, double epsilon, const Tensor<T>& x) {
  MOELAB_REQUIRE(delta.shape() == x.shape(), "project_linf: delta " + shape_str(delta.shape()) +
                                                 " vs x " + shape_str(x.shape()));
  MOELAB_REQUIRE(epsilon >= 0.0, "project_linf: negative epsilon");
  const T eps = floor_to<T>(epsilon);
  const T lo = T(0), hi = T(1);
  for (std::int64_t i = 0; i < delta.size(); ++i) {
    T d = std::clamp(delta[i], -eps, eps);
    const T xi = x[i];
    const T moved = std::clamp(static_cast<T>(xi + d), lo, hi);
    d = moved - xi;
    // Nudge toward zero until both constraints hold exactly.
    while (static_cast<double>(xi) + static_cast<double>(d) > 1.0 || std::fabs(static_cast<double>(d)) > epsilon)
      d = std::nextafter(d, T(0));
    while (static_cast<double>(xi) + static_cast<double>(d) < 0.0) d = std::nextafter(d, T(0));
    delta[i] = d;
  }
}

template <typename T>
Tensor<T> pgd(const LogitFn<T>& f, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
              std::type_identity_t<const Tensor<T>*> reference_logits, RngStream& rng) {
  cfg.validate();
  MOELAB_REQUIRE(x.rank() >= 1 && static_cast<std::size_t>(x.dim(0)) == y.size(), "pgd: batch/label size mismatch");
  if (cfg.objective == AttackObjective::kl)
    MOELAB_REQUIRE(reference_logits != nullptr, "pgd: the kl objective needs reference logits");

  Tensor<T> delta(x.shape());
  switch (cfg.init) {
    case AttackInit::zero: break;
    case AttackInit::uniform:
      for (auto& d : delta.data()) d = static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      break;
    case AttackInit::small_gauss:
      for (auto& d : delta.data()) d = static_cast<T>(cfg.gauss_sigma * rng.normal());
      break;
  }
  project_linf(delta, cfg.epsilon, x);
  if (cfg.epsilon == 0.0) return delta;

  const T alpha = static_cast<T>(cfg.alpha());
  for (int k = 0; k < cfg.steps; ++k) {
    Tape<T> tape;
    Tensor<T> xin = x;
    for (std::int64_t i = 0; i < xin.size(); ++i) xin[i] += delta[i];
    Var<T> input = tape.leaf(std::move(xin), true);
    Var<T> logits = f(tape, input);
    Var<T> loss = cfg.objective == AttackObjective::ce ? cross_entropy(logits, y)
                                                       : kl_divergence(*reference_logits, logits);
    tape.backward(loss);
    const Tensor<T>& g = tape.grad_ref(input.id);
    if (!g.empty()) {
      for (std::int64_t i = 0; i < delta.size(); ++i) {
        const T gi = g[i];
        delta[i] += gi > T(0) ? alpha : (gi < T(0) ? -alpha : T(0));
      }
    }
    project_linf(delta, cfg.epsilon, x);
  }
  return delta;
}

template <typename T>
Tensor<T> pgd(const Model<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
              std::type_identity_t<const Tensor<T>*> reference_logits, RngStream& rng, ForwardOptions<T> opt) {
  opt.grad_routers = false;
  opt.grad_backbone = false;
  opt.grad_scores = false;
  opt.flops = nullptr;
  opt.share_params = nullptr;
  opt.record_activations = false;
  LogitFn<T> f = [&](Tape<T>& tape, Var<T> input) { return model.forward(tape, input, opt).logits; };
  return pgd(f, x, y, cfg, reference_logits, rng);
}

#define MOELAB_INSTANTIATE_ATTACKS(T)                                                                        \
  template void project_linf<T>(Tensor<T>&, double, const Tensor<T>&);                                     \
  template Tensor<T> pgd<T>(const LogitFn<T>&, const Tensor<T>&, std::span<const int>, const AttackConfig&, \
                            std::type_identity_t<const Tensor<T>*>, RngStream&);                                                  \
  template Tensor<T> pgd<T>(const Model<T>&, const Tensor<T>&, std::span<const int>, const AttackConfig&,   \
                            std::type_identity_t<const Tensor<T>*>, RngStream&, ForwardOptions<T>);

MOELAB_INSTANTIATE_ATTACKS(float)
MOELAB_INSTANTIATE_ATTACKS(double)

}  // namespace moelab
