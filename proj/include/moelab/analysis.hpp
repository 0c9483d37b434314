// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/attacks.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab {

/// Clean and attacked predictions (and pathways, for MoE) of every sample,
/// computed once and shared by evaluation and dissection.
struct AttackPass {
  std::vector<int> labels;
  std::vector<int> clean_pred;
  std::vector<int> adv_pred;
  PathwayTrace clean_trace;  // empty for non-MoE models
  PathwayTrace adv_trace;
  AttackConfig attack;

  int size() const noexcept { return static_cast<int>(labels.size()); }
};

struct TracedLogits {
  Var<float> logits;
  PathwayTrace trace;
};
using TracedFn = std::function<TracedLogits(Tape<float>&, Var<float> input)>;

/// CE-objective PGD on every sample. Attack randomness for batch j comes from
/// stream "attack" of `seed`, child "eval", child j.
AttackPass attack_pass(const TracedFn& f, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size = 100);
/// Running-statistics forward with the model's routing mode.
AttackPass attack_pass(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size = 100);

struct EvalReport {
  double sa = 0.0;  // percent
  double ra = 0.0;  // percent
  int n = 0;
  AttackConfig attack;
};

EvalReport eval_report(const AttackPass& pass);
/// Throws ContractError on an empty dataset.
EvalReport evaluate(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                    int batch_size = 100);

/// Category fractions:
///   f1  routing unchanged, prediction correct
///   f2  routing changed,   prediction correct
///   f3  routing unchanged, prediction wrong
///   f4  routing changed,   prediction wrong
/// Routing "changed" means a different expert at any routed unit; a
/// prediction counts as attacked whenever it is wrong under perturbation.
struct DissectionReport {
  double f1 = 0.0, f2 = 0.0, f3 = 0.0, f4 = 0.0;
  int n = 0;

  double router_robustness() const { return f1 + f3; }
  double prediction_robustness() const { return f1 + f2; }
};

DissectionReport dissect_report(const AttackPass& pass);
/// Throws ContractError for a non-MoE model.
DissectionReport dissect(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                         int batch_size = 100);

/// Sorted, duplicate-free (unit, channel) pairs.
using ChannelPairs = std::vector<std::pair<int, int>>;

/// |a ∩ b| / |a ∪ b|; 1 when both are empty.
double iou(const ChannelPairs& a, const ChannelPairs& b);
ChannelPairs mask_pairs(const ChannelMask& mask);
ChannelPairs pathway_pairs(const ExpertPartition& partition, const PathwayTrace& trace, int sample);

struct IoUResult {
  int index = 0;
  std::string split;  // "clean" | "adversarial"
  double iou = 0.0;
};

/// IoU of every sample's pathway with `mask`, on clean inputs and, if an
/// attack is given, on the attacked inputs.
std::vector<IoUResult> pathway_iou(const Model<float>& moe, const ChannelMask& mask, const Dataset& data,
                                   const std::optional<AttackConfig>& attack, std::uint64_t seed,
                                   int batch_size = 100);

struct Histogram {
  std::vector<double> edges;  // bins + 1 values
  std::vector<std::int64_t> counts;

  std::int64_t total() const;
};

/// Uniform bins over [lo, hi]; the upper edge belongs to the last bin.
/// Values outside the range throw ContractError.
Histogram histogram(std::span<const double> values, int bins = 20, double lo = 0.0, double hi = 1.0);
void write_histogram_csv(std::ostream& os, const Histogram& h, const std::string& split);

// ---------------------------------------------------------------------------
// Sweep bookkeeping

struct SweepCell {
  std::string method;
  int num_experts = 2;
  double model_scale = 0.5;
  std::uint64_t seed = 0;
};

struct SweepRow {
  SweepCell cell;
  double sa = 0.0;
  double ra = 0.0;
  double gflops = 0.0;
};

/// Does the method route between experts (so N matters)?
bool method_uses_experts(const std::string& method);

/// Cartesian grid in (method, N, r, seed) order. Methods without experts get
/// one N value (1). Throws ContractError on an empty axis.
std::vector<SweepCell> sweep_grid(const std::vector<std::string>& methods, const std::vector<int>& num_experts,
                                  const std::vector<double>& model_scales, const std::vector<std::uint64_t>& seeds);
std::vector<SweepRow> run_sweep(const std::vector<SweepCell>& grid, const std::function<SweepRow(const SweepCell&)>& run);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

/// Shortest decimal form that round-trips (used by every CSV writer).
std::string format_number(double v);

}  // namespace moelab
