// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/optim.hpp"

namespace moelab {

template <typename T>
TradesResult<T> trades_loss(Tape<T>& tape, const Model<T>& model, const Tensor<T>& x, std::span<const int> y,
                            const ForwardOptions<T>& train_opt, const TradesOptions& opt, RngStream& rng) {
  MOELAB_REQUIRE(opt.attack.objective == AttackObjective::kl, "trades_loss needs the kl attack objective");
  MOELAB_REQUIRE(opt.inv_lambda >= 0.0, "trades inv_lambda must be >= 0");
  TradesResult<T> r;
  r.clean = model.forward(tape, tape.constant(x), train_opt);
  Var<T> ce = cross_entropy(r.clean.logits, y);
  r.ce = static_cast<double>(ce.value().item());
  r.loss = ce;
  if (opt.inv_lambda == 0.0) return r;

  const Tensor<T> reference = r.clean.logits.value();
  ForwardOptions<T> attack_opt = train_opt;
  attack_opt.norm = opt.attack_norm;
  const Tensor<T> delta = pgd(model, x, y, opt.attack, &reference, rng, attack_opt);
  Tensor<T> xadv = x;
  for (std::int64_t i = 0; i < xadv.size(); ++i) xadv[i] += delta[i];

  ForwardOptions<T> adv_opt = train_opt;
  adv_opt.flops = nullptr;
  adv_opt.record_activations = false;
  adv_opt.share_params = &r.clean;
  ForwardResult<T> adv = model.forward(tape, tape.constant(std::move(xadv)), adv_opt);
  Var<T> kl = kl_divergence(reference, adv.logits);
  r.kl = static_cast<double>(kl.value().item());
  r.loss = add(ce, scale(kl, static_cast<T>(opt.inv_lambda)));
  return r;
}

template TradesResult<float> trades_loss(Tape<float>&, const Model<float>&, const Tensor<float>&, std::span<const int>,
                                         const ForwardOptions<float>&, const TradesOptions&, RngStream&);
template TradesResult<double> trades_loss(Tape<double>&, const Model<double>&, const Tensor<double>&,
                                          std::span<const int>, const ForwardOptions<double>&, const TradesOptions&,
                                          RngStream&);

void TrainConfig::validate() const {
  MOELAB_REQUIRE(epochs >= 1, "train.epochs must be >= 1");
  MOELAB_REQUIRE(batch_size >= 1, "train.batch_size must be >= 1");
  MOELAB_REQUIRE(lr0 >= 0.0 && momentum >= 0.0 && weight_decay >= 0.0, "optimizer settings must be >= 0");
  MOELAB_REQUIRE(inv_lambda >= 0.0, "trades_inv_lambda must be >= 0");
  MOELAB_REQUIRE(lower_steps >= 1, "lower_steps must be >= 1");
  for (const auto& g : frozen)
    MOELAB_REQUIRE(g == "routers" || g == "backbone", "frozen group must be 'routers' or 'backbone', got '" + g + "'");
  attack.validate();
}

bool TrainConfig::is_frozen(const std::string& group) const {
  return std::find(frozen.begin(), frozen.end(), group) != frozen.end();
}

namespace {

TradesOptions trades_options(const TrainConfig& cfg, NormMode attack_norm) {
  TradesOptions t;
  t.inv_lambda = cfg.inv_lambda;
  t.attack = cfg.attack;
  t.attack.objective = AttackObjective::kl;
  t.attack_norm = attack_norm;
  return t;
}

std::vector<Tensor<float>> grads_of(const Tape<float>& tape, const std::vector<Var<float>>& vars) {
  std::vector<Tensor<float>> g;
  g.reserve(vars.size());
  for (const auto& v : vars) g.push_back(tape.grad(v));
  return g;
}

void check_finite(double loss, int epoch, int iter) {
  if (!std::isfinite(loss))
    throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", iteration " +
                         std::to_string(iter));
}

std::vector<int> batch_indices(const std::vector<int>& perm, int t, int b) {
  const int n = static_cast<int>(perm.size());
  const int begin = (t * b) % n;
  const int end = std::min(n, begin + b);
  return {perm.begin() + begin, perm.begin() + end};
}

int iterations_per_epoch(int n, int b) { return (n + b - 1) / b; }

}  // namespace

TrainHistory at_train(Model<float>& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  MOELAB_REQUIRE(data.size() > 0, "at_train: empty dataset");
  const bool train_routers = !cfg.is_frozen("routers") && model.routers().size() > 0;
  const bool train_backbone = !cfg.is_frozen("backbone");
  MOELAB_REQUIRE(train_routers || train_backbone, "at_train: all parameter groups are frozen");

  ForwardOptions<float> fopt;
  fopt.routing = model.config().moe.routing;
  fopt.norm = train_backbone ? NormMode::batch : cfg.fixed_backbone_norm;
  fopt.grad_routers = train_routers;
  fopt.grad_backbone = train_backbone;
  const TradesOptions topt = trades_options(cfg, NormMode::running);

  TrainHistory hist;
  const int n = data.size();
  const int iters = iterations_per_epoch(n, cfg.batch_size);
  const RngStream shuffle(cfg.seed, "shuffle");
  const RngStream attack(cfg.seed, "attack");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    const SgdOptions sgd{lr, cfg.momentum, cfg.weight_decay};
    const std::vector<int> perm = shuffle.child(static_cast<std::uint64_t>(epoch)).permutation(n);
    double loss_sum = 0.0;
    for (int t = 0; t < iters; ++t) {
      const auto idx = batch_indices(perm, t, cfg.batch_size);
      const Tensor<float> x = data.gather_images(idx);
      const std::vector<int> y = data.gather_labels(idx);
      RngStream rng = attack.child(static_cast<std::uint64_t>(epoch)).child(static_cast<std::uint64_t>(t));
      Tape<float> tape;
      auto r = trades_loss(tape, model, x, y, fopt, topt, rng);
      const double loss = static_cast<double>(r.loss.value().item());
      check_finite(loss, epoch, t);
      tape.backward(r.loss);
      if (train_routers) sgd_step(model.routers(), std::span<const Tensor<float>>(grads_of(tape, r.clean.router_vars)), sgd);
      if (train_backbone) {
        sgd_step(model.backbone(), std::span<const Tensor<float>>(grads_of(tape, r.clean.backbone_vars)), sgd);
        model.update_running_stats(r.clean, cfg.bn_momentum);
      }
      loss_sum += loss * static_cast<double>(idx.size());
    }
    EpochStats s{epoch, loss_sum / n, lr, iters};
    hist.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return hist;
}

TrainHistory advmoe_train(Model<float>& model, const Dataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  MOELAB_REQUIRE(model.variant() == Variant::moe, "advmoe_train needs an MoE model");
  MOELAB_REQUIRE(model.num_experts() >= 1 && model.routers().size() > 0, "advmoe_train needs router parameters");
  MOELAB_REQUIRE(cfg.frozen.empty(), "advmoe_train alternates both groups; frozen must be empty");
  MOELAB_REQUIRE(data.size() > 0, "advmoe_train: empty dataset");

  ForwardOptions<float> lower_opt;
  lower_opt.routing = model.config().moe.routing;
  lower_opt.norm = cfg.fixed_backbone_norm;
  lower_opt.grad_routers = true;
  ForwardOptions<float> upper_opt;
  upper_opt.routing = model.config().moe.routing;
  upper_opt.norm = NormMode::batch;
  upper_opt.grad_backbone = true;
  const TradesOptions topt = trades_options(cfg, NormMode::running);

  TrainHistory hist;
  const int n = data.size();
  const int iters = iterations_per_epoch(n, cfg.batch_size);
  const RngStream shuffle(cfg.seed, "shuffle");
  const RngStream attack(cfg.seed, "attack");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    const SgdOptions sgd{lr, cfg.momentum, cfg.weight_decay};
    const RngStream ep = shuffle.child(static_cast<std::uint64_t>(epoch));
    const std::vector<int> perm_lower = ep.child("lower").permutation(n);
    const std::vector<int> perm_upper = ep.child("upper").permutation(n);
    double loss_sum = 0.0;
    for (int t = 0; t < iters; ++t) {
      const RngStream it = attack.child(static_cast<std::uint64_t>(epoch)).child(static_cast<std::uint64_t>(t));
      for (int s = 0; s < cfg.lower_steps; ++s) {
        const auto idx = batch_indices(perm_lower, t * cfg.lower_steps + s, cfg.batch_size);
        const Tensor<float> x = data.gather_images(idx);
        const std::vector<int> y = data.gather_labels(idx);
        RngStream rng = it.child("lower").child(static_cast<std::uint64_t>(s));
        const std::uint64_t before = model.backbone_checksum();
        Tape<float> tape;
        auto r = trades_loss(tape, model, x, y, lower_opt, topt, rng);
        check_finite(static_cast<double>(r.loss.value().item()), epoch, t);
        tape.backward(r.loss);
        sgd_step(model.routers(), std::span<const Tensor<float>>(grads_of(tape, r.clean.router_vars)), sgd);
        MOELAB_REQUIRE(model.backbone_checksum() == before, "lower-level step modified the backbone");
        ++hist.lower_checks;
      }
      {
        const auto idx = batch_indices(perm_upper, t, cfg.batch_size);
        const Tensor<float> x = data.gather_images(idx);
        const std::vector<int> y = data.gather_labels(idx);
        RngStream rng = it.child("upper");
        const std::uint64_t before = model.router_checksum();
        Tape<float> tape;
        auto r = trades_loss(tape, model, x, y, upper_opt, topt, rng);
        const double loss = static_cast<double>(r.loss.value().item());
        check_finite(loss, epoch, t);
        tape.backward(r.loss);
        sgd_step(model.backbone(), std::span<const Tensor<float>>(grads_of(tape, r.clean.backbone_vars)), sgd);
        model.update_running_stats(r.clean, cfg.bn_momentum);
        MOELAB_REQUIRE(model.router_checksum() == before, "upper-level step modified the routers");
        ++hist.upper_checks;
        loss_sum += loss * static_cast<double>(idx.size());
      }
    }
    EpochStats s{epoch, loss_sum / n, lr, iters};
    hist.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return hist;
}

// ---------------------------------------------------------------------------

std::vector<int> mask_sizes(const std::vector<int>& channels, double ratio) {
  MOELAB_REQUIRE(ratio > 0.0 && ratio <= 1.0, "mask ratio must lie in (0, 1]");
  std::vector<int> k;
  for (std::size_t u = 0; u < channels.size(); ++u) {
    const double want = ratio * channels[u];
    MOELAB_REQUIRE(want >= 1.0, "mask ratio leaves layer " + std::to_string(u) + " with r*C < 1");
    k.push_back(std::min(channels[u], static_cast<int>(std::ceil(want - 1e-9))));
  }
  return k;
}

std::vector<int> top_k(const Tensor<float>& scores, int k) {
  MOELAB_REQUIRE(k >= 1 && k <= scores.size(), "top_k: k out of range");
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

MaskResult learn_robust_mask(const Model<float>& dense, const Dataset& data, const MaskLearnConfig& mcfg,
                             const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  MOELAB_REQUIRE(dense.variant() == Variant::dense, "learn_robust_mask needs a dense model");
  MOELAB_REQUIRE(mcfg.mask_epochs >= 0 && mcfg.finetune_epochs >= 0, "mask/finetune epochs must be >= 0");
  MOELAB_REQUIRE(mcfg.score_init == "magnitude" || mcfg.score_init == "constant",
                 "score_init must be 'magnitude' or 'constant'");
  const std::vector<int>& widths = dense.unit_channels();
  const std::vector<int> k = mask_sizes(widths, mcfg.ratio);

  // Scores start from the per-output-channel L1 norm of each unit's first conv.
  ParamGroup<float> scores{"scores", {}, false};
  for (std::size_t u = 0; u < widths.size(); ++u) {
    Tensor<float> s(Shape{widths[u]}, 1.0f);
    if (mcfg.score_init == "magnitude") {
      const std::string name = "u" + std::to_string(u) + ".conv_a.weight";
      const auto it = std::find_if(dense.backbone().params.begin(), dense.backbone().params.end(),
                                   [&](const auto& p) { return p.name == name; });
      MOELAB_REQUIRE(it != dense.backbone().params.end(), "missing " + name);
      const std::int64_t per = it->value.size() / widths[u];
      for (int c = 0; c < widths[u]; ++c) {
        double a = 0.0;
        for (std::int64_t j = 0; j < per; ++j) a += std::fabs(it->value[c * per + j]);
        s[c] = static_cast<float>(a / static_cast<double>(per));
      }
    }
    scores.params.push_back({"u" + std::to_string(u) + ".score", std::move(s), {}});
  }
  auto current_hard = [&] {
    std::vector<Tensor<float>> hard;
    for (std::size_t u = 0; u < widths.size(); ++u) {
      Tensor<float> h(Shape{widths[u]});
      for (int c : top_k(scores.params[u].value, k[u])) h[c] = 1.0f;
      hard.push_back(std::move(h));
    }
    return hard;
  };

  MaskResult res;
  const int n = data.size();
  const int iters = iterations_per_epoch(n, cfg.batch_size);
  const RngStream shuffle = RngStream(cfg.seed, "shuffle").child("mask");
  const RngStream attack = RngStream(cfg.seed, "attack").child("mask");
  const TradesOptions topt = trades_options(cfg, NormMode::batch);
  for (int epoch = 0; epoch < mcfg.mask_epochs; ++epoch) {
    const double lr = cosine_lr(epoch, mcfg.mask_epochs, mcfg.score_lr);
    const SgdOptions sgd{lr, cfg.momentum, 0.0};
    const std::vector<int> perm = shuffle.child(static_cast<std::uint64_t>(epoch)).permutation(n);
    double loss_sum = 0.0;
    for (int t = 0; t < iters; ++t) {
      const auto idx = batch_indices(perm, t, cfg.batch_size);
      const Tensor<float> x = data.gather_images(idx);
      const std::vector<int> y = data.gather_labels(idx);
      std::vector<Tensor<float>> score_values, hard = current_hard();
      for (const auto& p : scores.params) score_values.push_back(p.value);
      ForwardOptions<float> fopt;
      fopt.norm = NormMode::batch;
      fopt.channel_scores = &score_values;
      fopt.gate_hard = &hard;
      fopt.grad_scores = true;
      RngStream rng = attack.child(static_cast<std::uint64_t>(epoch)).child(static_cast<std::uint64_t>(t));
      Tape<float> tape;
      auto r = trades_loss(tape, dense, x, y, fopt, topt, rng);
      const double loss = static_cast<double>(r.loss.value().item());
      check_finite(loss, epoch, t);
      tape.backward(r.loss);
      sgd_step(scores, std::span<const Tensor<float>>(grads_of(tape, r.clean.score_vars)), sgd);
      loss_sum += loss * static_cast<double>(idx.size());
    }
    EpochStats s{epoch, loss_sum / n, lr, iters};
    res.mask_history.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
  }

  for (std::size_t u = 0; u < widths.size(); ++u) res.mask.units.push_back(top_k(scores.params[u].value, k[u]));
  for (auto& p : scores.params) res.scores.push_back(p.value);
  res.model = apply_mask(dense, res.mask, mcfg.ratio);
  if (mcfg.finetune_epochs > 0) {
    TrainConfig phase2 = cfg;
    phase2.epochs = mcfg.finetune_epochs;
    phase2.frozen.clear();
    EpochCallback shifted;
    if (on_epoch)
      shifted = [&](const EpochStats& s) {
        EpochStats o = s;
        o.epoch += mcfg.mask_epochs;
        on_epoch(o);
      };
    res.finetune_history = at_train(res.model, data, phase2, shifted);
  }
  return res;
}

}  // namespace moelab
