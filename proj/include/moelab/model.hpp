// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// MoE-CNN and its comparison variants.
//
// Activations are always carried at the full width of the variant's layers.
// A routed unit multiplies its output by a per-sample channel gate, so the
// channels outside the chosen expert are exactly zero and the next unit only
// ever reads the previous expert's slice. In hard routing the gate is
//
//     gate = hard + (soft - detach(soft)),   soft = probs x membership
//
// which equals the 0/1 expert mask in value while sending the gradient of the
// gate into the router probabilities (straight-through top-1).

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/optim.hpp"

namespace moelab {

enum class Variant { dense, sdense, sparse, moe };
enum class RoutingMode { hard, soft };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
std::string to_string(RoutingMode m);
RoutingMode parse_routing_mode(const std::string& s);

/// One backbone unit: a plain conv-bn-relu layer or a basic residual block.
/// Every unit is one routing/masking level with `out_channels` channels.
struct UnitSpec {
  enum class Kind { plain, residual };
  Kind kind = Kind::plain;
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
};

struct BackboneConfig {
  std::string arch = "custom";
  int in_channels = 3;
  int height = 16;
  int width = 16;
  int num_classes = 10;
  std::vector<UnitSpec> units;

  void validate() const;
};

/// Four 3x3 conv layers (strides 1,2,2,1), global pool, linear head.
BackboneConfig tiny_conv_net(int num_classes, int height = 16, int width = 16, int in_channels = 3,
                             std::vector<int> widths = {16, 32, 64, 64});
/// Stem conv + three basic blocks (strides 1,2,2), global pool, linear head.
BackboneConfig mini_resnet8(int num_classes, int height = 16, int width = 16, int in_channels = 3,
                            std::vector<int> widths = {16, 32, 64});

struct MoEConfig {
  int num_experts = 2;
  double model_scale = 0.5;
  RoutingMode routing = RoutingMode::hard;
  int blocks_per_router = 1;

  void validate() const;
};

/// round-half-to-even(r * channels).
int expert_width(int channels, double model_scale);

/// Channel-index sets of the N experts of one layer. Disjoint contiguous
/// blocks when N*r <= 1, otherwise evenly spaced overlapping windows with
/// start_i = round(i * (C - e) / (N - 1)).
std::vector<std::vector<int>> expert_partition(int channels, int num_experts, double model_scale);

/// partition[unit][expert] -> sorted channel list.
using ExpertPartition = std::vector<std::vector<std::vector<int>>>;

/// Static, input-agnostic channel selection; one sorted set per unit.
struct ChannelMask {
  std::vector<std::vector<int>> units;

  void validate(const std::vector<int>& unit_channels) const;
  bool operator==(const ChannelMask&) const = default;
};

/// Mask that selects expert `expert` of every unit.
ChannelMask expert_mask(const ExpertPartition& partition, int expert);

struct ModelConfig {
  BackboneConfig backbone;
  Variant variant = Variant::moe;
  MoEConfig moe;
  std::optional<ChannelMask> mask;  // required for Variant::sparse
  std::uint64_t seed = 0;
};

/// Per-input expert choice at every unit plus the gate probabilities.
struct PathwayTrace {
  int batch = 0;
  int units = 0;
  int num_experts = 0;
  std::vector<int> expert;    // [b * units + u]
  std::vector<double> probs;  // [(b * units + u) * num_experts + i]

  bool empty() const noexcept { return expert.empty(); }
  int expert_at(int b, int u) const { return expert[static_cast<std::size_t>(b * units + u)]; }
  double prob_at(int b, int u, int i) const {
    return probs[static_cast<std::size_t>((b * units + u) * num_experts + i)];
  }
  /// Same expert at every unit for samples `b` of this and `ob` of `other`.
  bool same_pathway(int b, const PathwayTrace& other, int ob) const;
};

/// Accumulates instrumented FLOPs (2 x multiply-accumulates) per sample.
struct FlopTally {
  double total = 0.0;
  std::int64_t samples = 0;
  double per_sample() const { return samples > 0 ? total / static_cast<double>(samples) : 0.0; }
};

template <typename T>
struct ForwardResult;

template <typename T>
struct ForwardOptions {
  RoutingMode routing = RoutingMode::hard;
  NormMode norm = NormMode::running;
  bool grad_routers = false;
  bool grad_backbone = false;
  int forced_expert = -1;  // >= 0 pins every router to this expert
  /// Per-unit channel scores (C) replacing the variant's own gating. The gate
  /// takes the 0/1 value `gate_hard[u]` and passes its gradient to the scores
  /// unchanged (straight-through top-k).
  const std::vector<Tensor<T>>* channel_scores = nullptr;
  const std::vector<Tensor<T>>* gate_hard = nullptr;
  bool grad_scores = false;
  FlopTally* flops = nullptr;
  bool record_activations = false;
  /// Reuse the parameter (and score) leaves of an earlier pass on the same
  /// tape so both passes accumulate into one gradient per tensor.
  const ForwardResult<T>* share_params = nullptr;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  std::vector<Var<T>> router_vars;    // aligned with routers().params
  std::vector<Var<T>> backbone_vars;  // aligned with backbone().params
  PathwayTrace trace;
  std::vector<NormBatchStats<T>> batch_stats;  // aligned with buffers, batch mode only
  std::vector<Var<T>> activations;             // unit outputs when recorded
  std::vector<Var<T>> score_vars;              // aligned with channel_scores
};

template <typename T>
class Model {
 public:
  /// Allocates and initializes a model of `cfg.variant`. Weights are a pure
  /// function of (seed, tensor name, dense coordinate), so S-Dense and sparse
  /// variants hold exact sub-blocks of the Dense weights for the same seed.
  static Model build(const ModelConfig& cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  Variant variant() const noexcept { return cfg_.variant; }
  const ExpertPartition& partition() const noexcept { return partition_; }
  /// Actual channel width of every unit (shrunk for S-Dense).
  const std::vector<int>& unit_channels() const noexcept { return unit_channels_; }
  int num_units() const noexcept { return static_cast<int>(units_.size()); }
  int num_routers() const noexcept { return static_cast<int>(router_w_.size()); }
  int num_experts() const noexcept { return cfg_.variant == Variant::moe ? cfg_.moe.num_experts : 1; }

  ParamGroup<T>& routers() noexcept { return routers_; }
  const ParamGroup<T>& routers() const noexcept { return routers_; }
  ParamGroup<T>& backbone() noexcept { return backbone_; }
  const ParamGroup<T>& backbone() const noexcept { return backbone_; }
  ParamGroup<T>& group(const std::string& name);

  /// Normalization running statistics: names and values in declared order.
  const std::vector<std::string>& buffer_names() const noexcept { return buffer_names_; }
  std::vector<Tensor<T>>& buffers() noexcept { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const noexcept { return buffers_; }

  /// Checksum over backbone weights and normalization statistics.
  std::uint64_t backbone_checksum() const;
  std::uint64_t router_checksum() const { return routers_.checksum(); }

  ForwardResult<T> forward(Tape<T>& tape, Var<T> x, const ForwardOptions<T>& opt) const;

  /// Exponential moving update of running statistics from a batch-mode pass.
  void update_running_stats(const ForwardResult<T>& result, double momentum = 0.1);

  template <typename U>
  Model<U> cast() const;

  /// Replace the sparse variant's mask (sizes checked).
  void set_mask(const ChannelMask& mask);

 private:
  template <typename U>
  friend class Model;

  struct ConvBn {
    int conv = -1, gamma = -1, beta = -1, stats = -1;  // stats: index of running-mean buffer
    int kernel = 3, stride = 1, padding = 1;
  };
  struct Unit {
    bool residual = false;
    int in_channels = 0, out_channels = 0;
    ConvBn a, b, proj;
    bool has_proj = false;
    int router = -1;      // router deciding this unit (MoE only)
    bool router_head = false;  // this unit evaluates the router
  };

  Var<T> conv_bn(Tape<T>& tape, Var<T> x, const ConvBn& layer, const std::vector<Var<T>>& bb,
                 const ForwardOptions<T>& opt, const Tensor<T>* weights, ForwardResult<T>& out) const;
  int add_param(const std::string& name, Shape shape, Shape dense_shape, double init_std, bool router);
  int add_bn(const std::string& prefix, int channels, ConvBn& layer);

  ModelConfig cfg_;
  ExpertPartition partition_;
  std::vector<Tensor<T>> membership_;  // per unit (N, C)
  std::vector<int> unit_channels_;
  std::vector<Unit> units_;
  std::vector<int> router_w_, router_b_;
  int head_w_ = -1, head_b_ = -1;
  ParamGroup<T> routers_{"routers", {}, false};
  ParamGroup<T> backbone_{"backbone", {}, false};
  std::vector<std::string> buffer_names_;
  std::vector<Tensor<T>> buffers_;
};

/// Dense model restricted to a static channel mask (the Sparse-CNN variant).
/// Each layer's mask must hold round(r*C) or ceil(r*C) channels, where r is
/// `model_scale` (default: the dense config's model scale).
template <typename T>
Model<T> apply_mask(const Model<T>& dense, const ChannelMask& mask, std::optional<double> model_scale = {});

/// Sparse twin of an S-Dense model: Dense-shaped weights holding the S-Dense
/// weights in their leading channels, masked to those channels.
template <typename T>
Model<T> sparse_twin_of_sdense(const Model<T>& sdense);

/// Router argmax with ties broken toward the lowest index.
int argmax_lowest(const double* values, int n);

/// Analytic per-example FLOPs (2 x MACs) of a test-time forward pass:
/// conv layers 2*Ho*Wo*k^2*Cin_active*Cout_active, the head (pooling plus
/// linear), and for MoE each router's pooling H*W*Cin plus 2*Cin*N.
double flops_estimate(const BackboneConfig& backbone, Variant variant, const MoEConfig& moe,
                      const std::optional<ChannelMask>& mask);
inline double flops_estimate(const ModelConfig& cfg) {
  return flops_estimate(cfg.backbone, cfg.variant, cfg.moe, cfg.mask);
}

/// Parameter count of the dense variant of `backbone`, used by size checks.
std::int64_t dense_parameter_count(const BackboneConfig& backbone);

}  // namespace moelab
