// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor<T>.
//
// A Tape records every op applied during one forward pass. Nodes are either
// owned values (op outputs, constants) or borrowed references to parameter
// storage that must outlive the tape. Gradients are only materialized for
// nodes that transitively depend on a requires_grad leaf, so an attack that
// asks for d(loss)/d(input) never pays for weight gradients.

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> leaf(Tensor<T> value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }

  /// Borrow parameter storage; `value` must outlive this tape.
  Var<T> param(const Tensor<T>& value, bool requires_grad) {
    Node n;
    n.borrowed = &value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Record an op output. `fn` runs during backward only if `requires_grad`.
  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  const Tensor<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.borrowed != nullptr ? *n.borrowed : n.owned;
  }
  bool requires_grad(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient accumulated so far; a zero tensor if the node never received one.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Mutable gradient buffer, zero-allocated on first use.
  Tensor<T>& grad_mut(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }
  const Tensor<T>& grad_ref(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Reverse sweep from a scalar loss. Throws ContractError on non-scalar input.
  void backward(Var<T> loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. Every op takes and returns Vars on the same tape.

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);
/// Same value, no gradient flow.
template <typename T> Var<T> detach(Var<T> a);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);

/// x: (B, Cin, H, W), w: (Cout, Cin, k, k), no bias.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, int stride, int padding);
/// x: (B, F), w: (O, F), b: (O) or invalid Var for no bias.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
/// (B, C, H, W) -> (B, C).
template <typename T> Var<T> global_avg_pool(Var<T> x);
/// Row-wise over (B, K).
template <typename T> Var<T> softmax(Var<T> logits);
template <typename T> Var<T> log_softmax(Var<T> logits);
/// Mean over the batch of -log softmax(logits)[label].
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);
/// Mean over the batch of KL(softmax(reference) || softmax(logits)). The
/// reference logits are constants; identical logits give exactly zero.
template <typename T> Var<T> kl_divergence(const Tensor<T>& reference_logits, Var<T> logits);

/// x: (B, C, H, W) times gate (B, C) or (C), broadcast over space.
template <typename T> Var<T> channel_gate(Var<T> x, Var<T> gate);
/// probs (B, N) times constant membership (N, C) -> (B, C).
template <typename T> Var<T> mix_rows(Var<T> probs, const Tensor<T>& membership);
/// Gather channels of (B, C, H, W); backward scatters into the selected slots.
template <typename T> Var<T> slice_channels(Var<T> x, std::span<const int> channels);

enum class NormMode { batch, running };

/// Per-channel statistics produced by a batch-mode normalization.
template <typename T>
struct NormBatchStats {
  Tensor<T> mean;      // (C)
  Tensor<T> var;       // (C), unbiased
  Tensor<T> count;     // (C), number of contributing elements
};

template <typename T>
struct BatchNormArgs {
  NormMode mode = NormMode::batch;
  const Tensor<T>* running_mean = nullptr;  // required in running mode and as fallback
  const Tensor<T>* running_var = nullptr;
  /// Optional (B, C) 0/1 weights selecting which samples contribute to each
  /// channel's batch statistics. Channels with no contributor fall back to
  /// the running statistics.
  const Tensor<T>* sample_weights = nullptr;
  NormBatchStats<T>* stats_out = nullptr;
  T eps = T(1e-5);
};

/// x: (B, C, H, W); gamma, beta: (C).
template <typename T> Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormArgs<T>& args);

}  // namespace moelab
