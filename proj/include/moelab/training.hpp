// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moelab/attacks.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct TradesOptions {
  double inv_lambda = 6.0;  // weight of the KL term
  AttackConfig attack{8.0 / 255.0, 2, 0.0, AttackObjective::kl, AttackInit::small_gauss};
  NormMode attack_norm = NormMode::running;
};

template <typename T>
struct TradesResult {
  Var<T> loss;
  double ce = 0.0;
  double kl = 0.0;
  ForwardResult<T> clean;
};

/// CE(f(x), y) + inv_lambda * KL(f(x) || f(x + delta*)), with delta* from PGD
/// on the KL objective and f(x) held constant inside the KL term. The clean
/// and adversarial passes use `train_opt`; the attack uses `attack_norm`.
/// With inv_lambda = 0 the attack and the adversarial pass are skipped.
template <typename T>
TradesResult<T> trades_loss(Tape<T>& tape, const Model<T>& model, const Tensor<T>& x, std::span<const int> y,
                            const ForwardOptions<T>& train_opt, const TradesOptions& opt, RngStream& rng);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double inv_lambda = 6.0;
  AttackConfig attack{8.0 / 255.0, 2, 0.0, AttackObjective::kl, AttackInit::small_gauss};
  std::uint64_t seed = 0;
  std::vector<std::string> frozen;  // subset of {"routers", "backbone"}
  int lower_steps = 1;              // router steps per AdvMoE iteration
  /// Normalization mode whenever the backbone is held fixed (router-only
  /// training and the AdvMoE lower level). Running statistics are never
  /// updated in that case.
  NormMode fixed_backbone_norm = NormMode::running;
  double bn_momentum = 0.1;

  void validate() const;
  bool is_frozen(const std::string& group) const;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;  // mean training loss (upper level for AdvMoE)
  double lr = 0.0;
  int iterations = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::int64_t lower_checks = 0;  // AdvMoE lower steps verified to leave the backbone untouched
  std::int64_t upper_checks = 0;  // AdvMoE upper steps verified to leave the routers untouched
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Joint TRADES training of every non-frozen group. Throws ContractError if
/// all groups are frozen, NumericalError on a non-finite loss.
TrainHistory at_train(Model<float>& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Alternating bi-level training: per iteration, `lower_steps` router steps
/// on one batch with the backbone fixed, then one backbone step on an
/// independently drawn batch with the routers fixed. Isolation is checked by
/// checksum after every step; a violation throws ContractError.
TrainHistory advmoe_train(Model<float>& model, const Dataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

struct MaskLearnConfig {
  double ratio = 0.5;
  int mask_epochs = 5;
  int finetune_epochs = 5;
  std::string score_init = "magnitude";  // "magnitude" | "constant"
  double score_lr = 0.1;
};

struct MaskResult {
  ChannelMask mask;
  Model<float> model;  // Sparse variant, finetuned
  std::vector<Tensor<float>> scores;
  TrainHistory mask_history;
  TrainHistory finetune_history;
};

/// ceil(r * C) per layer; throws ContractError if r * C < 1 anywhere.
std::vector<int> mask_sizes(const std::vector<int>& channels, double ratio);
/// Indices of the k largest scores (ties toward the lower index), sorted.
std::vector<int> top_k(const Tensor<float>& scores, int k);

/// Score-based structured mask learning: phase 1 trains per-channel scores
/// through a straight-through top-k gate with the weights fixed; phase 2 fixes
/// the top-k mask and finetunes the weights, both under the TRADES loss.
MaskResult learn_robust_mask(const Model<float>& dense, const Dataset& data, const MaskLearnConfig& mcfg,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace moelab
