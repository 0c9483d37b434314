// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/model.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <map>

#include "moelab/rng.hpp"

namespace moelab {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::dense: return "dense";
    case Variant::sdense: return "sdense";
    case Variant::sparse: return "sparse";
    case Variant::moe: return "moe";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "dense") return Variant::dense;
  if (s == "sdense") return Variant::sdense;
  if (s == "sparse") return Variant::sparse;
  if (s == "moe") return Variant::moe;
  throw ContractError("unknown model variant '" + s + "'");
}

std::string to_string(RoutingMode m) { return m == RoutingMode::hard ? "hard" : "soft"; }

RoutingMode parse_routing_mode(const std::string& s) {
  if (s == "hard") return RoutingMode::hard;
  if (s == "soft") return RoutingMode::soft;
  throw ContractError("routing mode must be 'hard' or 'soft', got '" + s + "'");
}

void BackboneConfig::validate() const {
  MOELAB_REQUIRE(in_channels >= 1 && height >= 1 && width >= 1, "backbone input shape must be positive");
  MOELAB_REQUIRE(num_classes >= 2, "backbone needs at least two classes");
  MOELAB_REQUIRE(!units.empty(), "backbone has no units");
  int h = height, w = width;
  for (const UnitSpec& u : units) {
    MOELAB_REQUIRE(u.out_channels >= 1 && u.kernel >= 1 && u.stride >= 1 && u.padding >= 0,
                   "backbone unit spec out of range");
    h = (h + 2 * u.padding - u.kernel) / u.stride + 1;
    w = (w + 2 * u.padding - u.kernel) / u.stride + 1;
    MOELAB_REQUIRE(h >= 1 && w >= 1, "backbone spatial size collapses to zero");
  }
}

BackboneConfig tiny_conv_net(int num_classes, int height, int width, int in_channels, std::vector<int> widths) {
  MOELAB_REQUIRE(widths.size() == 4, "TinyConvNet takes four widths");
  BackboneConfig cfg{"tiny", in_channels, height, width, num_classes, {}};
  const int strides[4] = {1, 2, 2, 1};
  for (int i = 0; i < 4; ++i) cfg.units.push_back({UnitSpec::Kind::plain, widths[static_cast<std::size_t>(i)], 3, strides[i], 1});
  return cfg;
}

BackboneConfig mini_resnet8(int num_classes, int height, int width, int in_channels, std::vector<int> widths) {
  MOELAB_REQUIRE(widths.size() == 3, "MiniResNet-8 takes three stage widths");
  BackboneConfig cfg{"resnet8", in_channels, height, width, num_classes, {}};
  cfg.units.push_back({UnitSpec::Kind::plain, widths[0], 3, 1, 1});
  cfg.units.push_back({UnitSpec::Kind::residual, widths[0], 3, 1, 1});
  cfg.units.push_back({UnitSpec::Kind::residual, widths[1], 3, 2, 1});
  cfg.units.push_back({UnitSpec::Kind::residual, widths[2], 3, 2, 1});
  return cfg;
}

void MoEConfig::validate() const {
  MOELAB_REQUIRE(num_experts >= 1, "MoE needs at least one expert");
  MOELAB_REQUIRE(model_scale > 0.0 && model_scale <= 1.0, "model scale must lie in (0, 1]");
  MOELAB_REQUIRE(blocks_per_router >= 1, "blocks_per_router must be >= 1");
}

int expert_width(int channels, double model_scale) {
  // std::nearbyint honours the default round-to-nearest-even mode.
  return static_cast<int>(std::nearbyint(model_scale * channels));
}

std::vector<std::vector<int>> expert_partition(int channels, int num_experts, double model_scale) {
  MOELAB_REQUIRE(num_experts >= 1, "expert_partition: need at least one expert");
  const int e = expert_width(channels, model_scale);
  MOELAB_REQUIRE(e >= 1 && e <= channels, "expert_partition: expert width " + std::to_string(e) +
                                              " outside [1, " + std::to_string(channels) + "]");
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(num_experts));
  const bool disjoint = num_experts * model_scale <= 1.0 + 1e-12 && num_experts * e <= channels;
  for (int i = 0; i < num_experts; ++i) {
    int start = 0;
    if (disjoint) {
      start = i * e;
    } else if (num_experts > 1) {
      start = static_cast<int>(std::nearbyint(static_cast<double>(i) * (channels - e) / (num_experts - 1)));
    }
    auto& s = sets[static_cast<std::size_t>(i)];
    for (int c = start; c < start + e; ++c) s.push_back(c);
  }
  return sets;
}

void ChannelMask::validate(const std::vector<int>& unit_channels) const {
  MOELAB_REQUIRE(units.size() == unit_channels.size(),
                 "channel mask has " + std::to_string(units.size()) + " layers, model has " +
                     std::to_string(unit_channels.size()));
  for (std::size_t u = 0; u < units.size(); ++u) {
    const auto& s = units[u];
    MOELAB_REQUIRE(!s.empty(), "channel mask layer " + std::to_string(u) + " is empty");
    for (std::size_t i = 0; i < s.size(); ++i) {
      MOELAB_REQUIRE(s[i] >= 0 && s[i] < unit_channels[u], "channel mask index out of range");
      MOELAB_REQUIRE(i == 0 || s[i] > s[i - 1], "channel mask sets must be sorted and duplicate-free");
    }
  }
}

ChannelMask expert_mask(const ExpertPartition& partition, int expert) {
  ChannelMask m;
  for (const auto& unit : partition) m.units.push_back(unit.at(static_cast<std::size_t>(expert)));
  return m;
}

bool PathwayTrace::same_pathway(int b, const PathwayTrace& other, int ob) const {
  for (int u = 0; u < units; ++u)
    if (expert_at(b, u) != other.expert_at(ob, u)) return false;
  return true;
}

int argmax_lowest(const double* values, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

namespace {

bool needs_projection(const UnitSpec& u, int in_dense) { return u.stride != 1 || in_dense != u.out_channels; }

int active_width(const BackboneConfig& bb, Variant v, const MoEConfig& moe, const std::optional<ChannelMask>& mask,
                 std::size_t u) {
  const int c = bb.units[u].out_channels;
  switch (v) {
    case Variant::dense: return c;
    case Variant::sdense:
    case Variant::moe: return expert_width(c, moe.model_scale);
    case Variant::sparse:
      MOELAB_REQUIRE(mask.has_value(), "sparse variant needs a channel mask");
      return static_cast<int>(mask->units.at(u).size());
  }
  return c;
}

double conv_flops(int out_h, int out_w, int k, double cin, double cout) {
  return 2.0 * out_h * out_w * k * k * cin * cout;
}

}  // namespace

double flops_estimate(const BackboneConfig& bb, Variant variant, const MoEConfig& moe,
                      const std::optional<ChannelMask>& mask) {
  bb.validate();
  double total = 0.0;
  int h = bb.height, w = bb.width;
  int in_dense = bb.in_channels;
  double in_active = bb.in_channels;
  double in_stored = bb.in_channels;
  for (std::size_t u = 0; u < bb.units.size(); ++u) {
    const UnitSpec& spec = bb.units[u];
    const double out_active = active_width(bb, variant, moe, mask, u);
    const double out_stored = variant == Variant::sdense ? expert_width(spec.out_channels, moe.model_scale)
                                                         : spec.out_channels;
    if (variant == Variant::moe && u % static_cast<std::size_t>(moe.blocks_per_router) == 0)
      total += static_cast<double>(h) * w * in_stored + 2.0 * in_stored * moe.num_experts;
    const int oh = (h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    const int ow = (w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    total += conv_flops(oh, ow, spec.kernel, in_active, out_active);
    if (spec.kind == UnitSpec::Kind::residual) {
      total += conv_flops(oh, ow, spec.kernel, out_active, out_active);
      if (needs_projection(spec, in_dense)) total += conv_flops(oh, ow, 1, in_active, out_active);
    }
    h = oh;
    w = ow;
    in_dense = spec.out_channels;
    in_active = out_active;
    in_stored = out_stored;
  }
  total += static_cast<double>(h) * w * in_active + 2.0 * in_active * bb.num_classes;
  return total;
}

// ---------------------------------------------------------------------------

namespace {

enum class Init { normal, zeros, ones };

}  // namespace

template <typename T>
int Model<T>::add_param(const std::string& name, Shape shape, Shape dense_shape, double init_std, bool router) {
  Tensor<T> t(shape);
  if (init_std > 0.0) {
    const std::uint64_t key = mix64(derive_seed(cfg_.seed, "init") ^ stable_hash(name));
    // Flat index in the dense tensor of each element of the (leading-corner) sub-tensor.
    const int rank = static_cast<int>(shape.size());
    std::vector<int> idx(static_cast<std::size_t>(rank), 0);
    for (std::int64_t flat = 0; flat < t.size(); ++flat) {
      std::int64_t dense_flat = 0;
      for (int d = 0; d < rank; ++d) dense_flat = dense_flat * dense_shape[static_cast<std::size_t>(d)] + idx[static_cast<std::size_t>(d)];
      t[flat] = static_cast<T>(init_std * counter_normal(key, static_cast<std::uint64_t>(dense_flat)));
      for (int d = rank - 1; d >= 0; --d) {
        if (++idx[static_cast<std::size_t>(d)] < shape[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
  }
  ParamGroup<T>& g = router ? routers_ : backbone_;
  g.params.push_back({name, std::move(t), {}});
  return static_cast<int>(g.params.size()) - 1;
}

template <typename T>
int Model<T>::add_bn(const std::string& prefix, int channels, ConvBn& layer) {
  layer.gamma = add_param(prefix + ".gamma", {channels}, {channels}, 0.0, false);
  backbone_.params[static_cast<std::size_t>(layer.gamma)].value.fill(T(1));
  layer.beta = add_param(prefix + ".beta", {channels}, {channels}, 0.0, false);
  layer.stats = static_cast<int>(buffers_.size());
  buffer_names_.push_back(prefix + ".running_mean");
  buffers_.emplace_back(Shape{channels}, T(0));
  buffer_names_.push_back(prefix + ".running_var");
  buffers_.emplace_back(Shape{channels}, T(1));
  return layer.stats;
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& cfg) {
  cfg.backbone.validate();
  cfg.moe.validate();
  Model m;
  m.cfg_ = cfg;
  const BackboneConfig& bb = cfg.backbone;
  const bool moe = cfg.variant == Variant::moe;
  const int n_exp = cfg.moe.num_experts;

  std::vector<int> dense_widths;
  for (const auto& u : bb.units) dense_widths.push_back(u.out_channels);
  for (std::size_t u = 0; u < bb.units.size(); ++u) {
    const int c = dense_widths[u];
    const int e = expert_width(c, cfg.moe.model_scale);
    if (cfg.variant == Variant::sdense || moe)
      MOELAB_REQUIRE(e >= 1 && e <= c, "unit " + std::to_string(u) + ": expert width " + std::to_string(e) +
                                           " outside [1, " + std::to_string(c) + "]");
    m.unit_channels_.push_back(cfg.variant == Variant::sdense ? e : c);
  }
  if (cfg.variant == Variant::sparse) {
    MOELAB_REQUIRE(cfg.mask.has_value(), "sparse variant requires a channel mask");
    cfg.mask->validate(m.unit_channels_);
  }
  if (moe) {
    for (std::size_t u = 0; u < bb.units.size(); ++u) {
      MOELAB_REQUIRE(dense_widths[u] >= n_exp, "MoE layer needs at least one channel per expert");
      auto sets = expert_partition(dense_widths[u], n_exp, cfg.moe.model_scale);
      Tensor<T> member(Shape{n_exp, dense_widths[u]});
      for (int i = 0; i < n_exp; ++i)
        for (int c : sets[static_cast<std::size_t>(i)]) member[static_cast<std::int64_t>(i) * dense_widths[u] + c] = T(1);
      m.partition_.push_back(std::move(sets));
      m.membership_.push_back(std::move(member));
    }
  }

  int in_dense = bb.in_channels;
  int in_actual = bb.in_channels;
  for (std::size_t u = 0; u < bb.units.size(); ++u) {
    const UnitSpec& spec = bb.units[u];
    const std::string p = "u" + std::to_string(u);
    Unit unit;
    unit.residual = spec.kind == UnitSpec::Kind::residual;
    unit.in_channels = in_actual;
    unit.out_channels = m.unit_channels_[u];
    const int out_dense = spec.out_channels;
    const int k = spec.kernel;

    if (moe && u % static_cast<std::size_t>(cfg.moe.blocks_per_router) == 0) {
      const int r = static_cast<int>(m.router_w_.size());
      const std::string rp = "router" + std::to_string(r);
      m.router_w_.push_back(m.add_param(rp + ".weight", {n_exp, in_actual}, {n_exp, in_dense},
                                        std::sqrt(1.0 / in_dense), true));
      m.router_b_.push_back(m.add_param(rp + ".bias", {n_exp}, {n_exp}, 0.0, true));
      unit.router_head = true;
    }
    if (moe) unit.router = static_cast<int>(m.router_w_.size()) - 1;

    auto conv = [&](const std::string& name, ConvBn& layer, int cin, int cin_dense, int kernel, int stride, int pad) {
      layer.kernel = kernel;
      layer.stride = stride;
      layer.padding = pad;
      layer.conv = m.add_param(name + ".weight", {unit.out_channels, cin, kernel, kernel},
                               {out_dense, cin_dense, kernel, kernel}, std::sqrt(2.0 / (cin_dense * kernel * kernel)),
                               false);
    };
    conv(p + ".conv_a", unit.a, in_actual, in_dense, k, spec.stride, spec.padding);
    m.add_bn(p + ".bn_a", unit.out_channels, unit.a);
    if (unit.residual) {
      conv(p + ".conv_b", unit.b, unit.out_channels, out_dense, k, 1, spec.padding);
      m.add_bn(p + ".bn_b", unit.out_channels, unit.b);
      if (needs_projection(spec, in_dense)) {
        unit.has_proj = true;
        conv(p + ".proj", unit.proj, in_actual, in_dense, 1, spec.stride, 0);
        m.add_bn(p + ".bn_proj", unit.out_channels, unit.proj);
      }
    }
    m.units_.push_back(unit);
    in_dense = out_dense;
    in_actual = unit.out_channels;
  }
  m.head_w_ = m.add_param("head.weight", {bb.num_classes, in_actual}, {bb.num_classes, in_dense},
                          std::sqrt(1.0 / in_dense), false);
  m.head_b_ = m.add_param("head.bias", {bb.num_classes}, {bb.num_classes}, 0.0, false);
  return m;
}

template <typename T>
ParamGroup<T>& Model<T>::group(const std::string& name) {
  if (name == "routers") return routers_;
  if (name == "backbone") return backbone_;
  throw ContractError("unknown parameter group '" + name + "'");
}

template <typename T>
std::uint64_t Model<T>::backbone_checksum() const {
  std::uint64_t h = backbone_.checksum();
  for (const auto& b : buffers_) h = mix64(h ^ checksum(b));
  return h;
}

template <typename T>
void Model<T>::set_mask(const ChannelMask& mask) {
  MOELAB_REQUIRE(cfg_.variant == Variant::sparse, "set_mask on a non-sparse model");
  mask.validate(unit_channels_);
  cfg_.mask = mask;
}

template <typename T>
Var<T> Model<T>::conv_bn(Tape<T>& tape, Var<T> x, const ConvBn& layer, const std::vector<Var<T>>& bb,
                         const ForwardOptions<T>& opt, const Tensor<T>* weights, ForwardResult<T>& out) const {
  (void)tape;
  Var<T> z = conv2d(x, bb[static_cast<std::size_t>(layer.conv)], layer.stride, layer.padding);
  BatchNormArgs<T> args;
  args.mode = opt.norm;
  args.running_mean = &buffers_[static_cast<std::size_t>(layer.stats)];
  args.running_var = &buffers_[static_cast<std::size_t>(layer.stats + 1)];
  args.sample_weights = weights;
  if (opt.norm == NormMode::batch) args.stats_out = &out.batch_stats[static_cast<std::size_t>(layer.stats / 2)];
  return batch_norm(z, bb[static_cast<std::size_t>(layer.gamma)], bb[static_cast<std::size_t>(layer.beta)], args);
}

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& tape, Var<T> x, const ForwardOptions<T>& opt) const {
  const Tensor<T>& xv = x.value();
  const BackboneConfig& bbc = cfg_.backbone;
  MOELAB_REQUIRE(xv.rank() == 4 && xv.dim(1) == bbc.in_channels && xv.dim(2) == bbc.height && xv.dim(3) == bbc.width,
                 "input shape " + shape_str(xv.shape()) + " does not match backbone (" +
                     std::to_string(bbc.in_channels) + "," + std::to_string(bbc.height) + "," +
                     std::to_string(bbc.width) + ")");
  if (opt.channel_scores != nullptr)
    MOELAB_REQUIRE(opt.gate_hard != nullptr && opt.channel_scores->size() == units_.size() &&
                       opt.gate_hard->size() == units_.size(),
                   "channel scores must cover every unit");
  const int batch = xv.dim(0);
  ForwardResult<T> out;
  if (opt.share_params != nullptr) {
    const ForwardResult<T>& prev = *opt.share_params;
    MOELAB_REQUIRE(prev.router_vars.size() == routers_.params.size() &&
                       prev.backbone_vars.size() == backbone_.params.size(),
                   "shared parameter leaves do not match this model");
    MOELAB_REQUIRE(prev.backbone_vars.empty() || prev.backbone_vars.front().tape == &tape,
                   "shared parameter leaves belong to another tape");
    out.router_vars = prev.router_vars;
    out.backbone_vars = prev.backbone_vars;
  } else {
    for (const auto& p : routers_.params) out.router_vars.push_back(tape.param(p.value, opt.grad_routers));
    for (const auto& p : backbone_.params) out.backbone_vars.push_back(tape.param(p.value, opt.grad_backbone));
  }
  if (opt.norm == NormMode::batch) out.batch_stats.resize(buffers_.size() / 2);
  const auto& bb = out.backbone_vars;

  const bool routed = cfg_.variant == Variant::moe && opt.channel_scores == nullptr;
  const int n_exp = num_experts();
  if (routed) {
    out.trace.batch = batch;
    out.trace.units = num_units();
    out.trace.num_experts = n_exp;
    out.trace.expert.assign(static_cast<std::size_t>(batch * num_units()), 0);
    out.trace.probs.assign(static_cast<std::size_t>(batch * num_units() * n_exp), 0.0);
  }
  MOELAB_REQUIRE(opt.forced_expert < n_exp, "forced expert index out of range");

  std::vector<double> sample_flops(static_cast<std::size_t>(batch), 0.0);
  std::vector<int> in_active(static_cast<std::size_t>(batch), bbc.in_channels);
  std::vector<int> choice(static_cast<std::size_t>(batch), 0);
  Var<T> probs;
  Var<T> h = x;

  for (std::size_t ui = 0; ui < units_.size(); ++ui) {
    const Unit& unit = units_[ui];
    const int c_out = unit.out_channels;
    const int in_stored = h.value().dim(1);
    Var<T> gate;
    Tensor<T> hard;  // (B, C) 0/1 pathway mask
    bool gated = false;

    auto broadcast_rows = [&](const Tensor<T>& row) {
      Tensor<T> m(Shape{batch, c_out});
      for (int b = 0; b < batch; ++b) std::copy_n(row.ptr(), c_out, m.ptr() + static_cast<std::int64_t>(b) * c_out);
      return m;
    };

    if (opt.channel_scores != nullptr) {
      const Tensor<T>& hard_row = (*opt.gate_hard)[ui];
      MOELAB_REQUIRE(hard_row.size() == c_out && (*opt.channel_scores)[ui].size() == c_out,
                     "channel score width mismatch at unit " + std::to_string(ui));
      Var<T> s = opt.share_params != nullptr ? opt.share_params->score_vars.at(ui)
                                             : tape.param((*opt.channel_scores)[ui], opt.grad_scores);
      out.score_vars.push_back(s);
      gate = add(tape.constant(hard_row), sub(s, detach(s)));
      hard = broadcast_rows(hard_row);
      gated = true;
    } else if (cfg_.variant == Variant::sparse) {
      Tensor<T> row(Shape{c_out});
      for (int c : cfg_.mask->units[ui]) row[c] = T(1);
      hard = broadcast_rows(row);
      gate = tape.constant(std::move(row));
      gated = true;
    } else if (routed) {
      if (unit.router_head) {
        Var<T> pooled = global_avg_pool(h);
        Var<T> logits = linear(pooled, out.router_vars[static_cast<std::size_t>(router_w_[static_cast<std::size_t>(unit.router)])],
                               out.router_vars[static_cast<std::size_t>(router_b_[static_cast<std::size_t>(unit.router)])]);
        probs = softmax(logits);
        std::vector<double> row(static_cast<std::size_t>(n_exp));
        for (int b = 0; b < batch; ++b) {
          for (int i = 0; i < n_exp; ++i) row[static_cast<std::size_t>(i)] = logits.value()[static_cast<std::int64_t>(b) * n_exp + i];
          choice[static_cast<std::size_t>(b)] = opt.forced_expert >= 0 ? opt.forced_expert : argmax_lowest(row.data(), n_exp);
        }
        const double hw = static_cast<double>(h.value().dim(2)) * h.value().dim(3);
        for (auto& f : sample_flops) f += hw * in_stored + 2.0 * in_stored * n_exp;
      }
      const Tensor<T>& member = membership_[ui];
      hard = Tensor<T>(Shape{batch, c_out});
      for (int b = 0; b < batch; ++b) {
        const int k = choice[static_cast<std::size_t>(b)];
        std::copy_n(member.ptr() + static_cast<std::int64_t>(k) * c_out, c_out, hard.ptr() + static_cast<std::int64_t>(b) * c_out);
        out.trace.expert[static_cast<std::size_t>(b * num_units() + static_cast<int>(ui))] = k;
        for (int i = 0; i < n_exp; ++i)
          out.trace.probs[static_cast<std::size_t>((b * num_units() + static_cast<int>(ui)) * n_exp + i)] =
              static_cast<double>(probs.value()[static_cast<std::int64_t>(b) * n_exp + i]);
      }
      Var<T> soft = mix_rows(probs, member);
      if (opt.routing == RoutingMode::hard)
        gate = add(tape.constant(hard), sub(soft, detach(soft)));
      else
        gate = soft;
      gated = true;
    }
    const Tensor<T>* stat_weights = (gated && !(routed && opt.routing == RoutingMode::soft)) ? &hard : nullptr;

    std::vector<int> out_active(static_cast<std::size_t>(batch), c_out);
    if (gated) {
      for (int b = 0; b < batch; ++b) {
        int n = 0;
        for (int c = 0; c < c_out; ++c) n += hard[static_cast<std::int64_t>(b) * c_out + c] != T(0);
        out_active[static_cast<std::size_t>(b)] = n;
      }
    }

    Var<T> y;
    auto count_conv = [&](const Var<T>& conv_out, int k, const std::vector<int>& cin, const std::vector<int>& cout) {
      const double area = static_cast<double>(conv_out.value().dim(2)) * conv_out.value().dim(3);
      for (int b = 0; b < batch; ++b)
        sample_flops[static_cast<std::size_t>(b)] +=
            2.0 * area * k * k * cin[static_cast<std::size_t>(b)] * cout[static_cast<std::size_t>(b)];
    };
    if (!unit.residual) {
      Var<T> z = conv_bn(tape, h, unit.a, bb, opt, stat_weights, out);
      count_conv(z, unit.a.kernel, in_active, out_active);
      y = relu(z);
      if (gated) y = channel_gate(y, gate);
    } else {
      Var<T> za = conv_bn(tape, h, unit.a, bb, opt, stat_weights, out);
      count_conv(za, unit.a.kernel, in_active, out_active);
      Var<T> mid = relu(za);
      if (gated) mid = channel_gate(mid, gate);
      Var<T> zb = conv_bn(tape, mid, unit.b, bb, opt, stat_weights, out);
      count_conv(zb, unit.b.kernel, out_active, out_active);
      Var<T> shortcut = h;
      if (unit.has_proj) {
        shortcut = conv_bn(tape, h, unit.proj, bb, opt, stat_weights, out);
        count_conv(shortcut, 1, in_active, out_active);
      }
      y = relu(add(zb, shortcut));
      if (gated) y = channel_gate(y, gate);
    }
    if (opt.record_activations) out.activations.push_back(y);
    h = y;
    in_active = out_active;
  }

  Var<T> pooled = global_avg_pool(h);
  out.logits = linear(pooled, bb[static_cast<std::size_t>(head_w_)], bb[static_cast<std::size_t>(head_b_)]);
  if (opt.flops != nullptr) {
    const double hw = static_cast<double>(h.value().dim(2)) * h.value().dim(3);
    for (int b = 0; b < batch; ++b) {
      const double a = in_active[static_cast<std::size_t>(b)];
      opt.flops->total += sample_flops[static_cast<std::size_t>(b)] + hw * a + 2.0 * a * bbc.num_classes;
    }
    opt.flops->samples += batch;
  }
  return out;
}

template <typename T>
void Model<T>::update_running_stats(const ForwardResult<T>& result, double momentum) {
  MOELAB_REQUIRE(result.batch_stats.size() * 2 == buffers_.size(), "running-stat update needs a batch-mode forward result");
  const T m = static_cast<T>(momentum);
  for (std::size_t i = 0; i < result.batch_stats.size(); ++i) {
    const NormBatchStats<T>& s = result.batch_stats[i];
    Tensor<T>& mean = buffers_[2 * i];
    Tensor<T>& var = buffers_[2 * i + 1];
    for (std::int64_t c = 0; c < mean.size(); ++c) {
      if (s.count[c] <= T(0)) continue;
      mean[c] = (T(1) - m) * mean[c] + m * s.mean[c];
      var[c] = (T(1) - m) * var[c] + m * s.var[c];
    }
  }
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> m;
  m.cfg_ = cfg_;
  m.partition_ = partition_;
  for (const auto& t : membership_) m.membership_.push_back(t.template cast<U>());
  m.unit_channels_ = unit_channels_;
  for (const auto& u : units_) {
    typename Model<U>::Unit v;
    v.residual = u.residual;
    v.in_channels = u.in_channels;
    v.out_channels = u.out_channels;
    auto copy = [](const ConvBn& a) {
      typename Model<U>::ConvBn b;
      b.conv = a.conv;
      b.gamma = a.gamma;
      b.beta = a.beta;
      b.stats = a.stats;
      b.kernel = a.kernel;
      b.stride = a.stride;
      b.padding = a.padding;
      return b;
    };
    v.a = copy(u.a);
    v.b = copy(u.b);
    v.proj = copy(u.proj);
    v.has_proj = u.has_proj;
    v.router = u.router;
    v.router_head = u.router_head;
    m.units_.push_back(v);
  }
  m.router_w_ = router_w_;
  m.router_b_ = router_b_;
  m.head_w_ = head_w_;
  m.head_b_ = head_b_;
  auto cast_group = [](const ParamGroup<T>& g) {
    ParamGroup<U> o{g.name, {}, g.frozen};
    for (const auto& p : g.params) o.params.push_back({p.name, p.value.template cast<U>(), {}});
    return o;
  };
  m.routers_ = cast_group(routers_);
  m.backbone_ = cast_group(backbone_);
  m.buffer_names_ = buffer_names_;
  for (const auto& b : buffers_) m.buffers_.push_back(b.template cast<U>());
  return m;
}

template <typename T>
Model<T> apply_mask(const Model<T>& dense, const ChannelMask& mask, std::optional<double> model_scale) {
  MOELAB_REQUIRE(dense.variant() == Variant::dense, "apply_mask expects a dense model");
  const double r = model_scale.value_or(dense.config().moe.model_scale);
  MOELAB_REQUIRE(r > 0.0 && r <= 1.0, "apply_mask: model scale must lie in (0, 1]");
  mask.validate(dense.unit_channels());
  for (std::size_t u = 0; u < mask.units.size(); ++u) {
    const int c = dense.unit_channels()[u];
    const int rounded = expert_width(c, r);
    const int up = static_cast<int>(std::ceil(r * c - 1e-9));
    const int got = static_cast<int>(mask.units[u].size());
    MOELAB_REQUIRE(got == rounded || got == up,
                   "apply_mask: layer " + std::to_string(u) + " mask has " + std::to_string(got) +
                       " channels, expected round(r*C) = " + std::to_string(rounded));
  }
  ModelConfig cfg = dense.config();
  cfg.variant = Variant::sparse;
  cfg.moe.model_scale = r;
  cfg.mask = mask;
  Model<T> out = Model<T>::build(cfg);
  for (std::size_t i = 0; i < out.backbone().params.size(); ++i)
    out.backbone().params[i].value = dense.backbone().params[i].value;
  out.buffers() = dense.buffers();
  return out;
}

template <typename T>
Model<T> sparse_twin_of_sdense(const Model<T>& sdense) {
  MOELAB_REQUIRE(sdense.variant() == Variant::sdense, "sparse_twin_of_sdense expects an S-Dense model");
  ModelConfig cfg = sdense.config();
  ChannelMask mask;
  for (int w : sdense.unit_channels()) {
    std::vector<int> s(static_cast<std::size_t>(w));
    for (int c = 0; c < w; ++c) s[static_cast<std::size_t>(c)] = c;
    mask.units.push_back(std::move(s));
  }
  cfg.variant = Variant::sparse;
  cfg.mask = mask;
  Model<T> out = Model<T>::build(cfg);

  auto embed = [](const Tensor<T>& src, Tensor<T>& dst) {
    const int rank = src.rank();
    MOELAB_REQUIRE(rank == dst.rank(), "embed: rank mismatch");
    dst.fill(T(0));
    std::vector<int> idx(static_cast<std::size_t>(rank), 0);
    for (std::int64_t flat = 0; flat < src.size(); ++flat) {
      std::int64_t df = 0;
      for (int d = 0; d < rank; ++d) df = df * dst.dim(d) + idx[static_cast<std::size_t>(d)];
      dst[df] = src[flat];
      for (int d = rank - 1; d >= 0; --d) {
        if (++idx[static_cast<std::size_t>(d)] < src.dim(d)) break;
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
  };
  for (std::size_t i = 0; i < out.backbone().params.size(); ++i)
    embed(sdense.backbone().params[i].value, out.backbone().params[i].value);
  for (std::size_t i = 0; i < out.buffers().size(); ++i) {
    Tensor<T>& dst = out.buffers()[i];
    const T fill = out.buffer_names()[i].ends_with("running_var") ? T(1) : T(0);
    Tensor<T> src = sdense.buffers()[i];
    embed(src, dst);
    for (std::int64_t c = src.size(); c < dst.size(); ++c) dst[c] = fill;
  }
  return out;
}

std::int64_t dense_parameter_count(const BackboneConfig& backbone) {
  ModelConfig cfg;
  cfg.backbone = backbone;
  cfg.variant = Variant::dense;
  return Model<float>::build(cfg).backbone().numel();
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template Model<float> apply_mask(const Model<float>&, const ChannelMask&, std::optional<double>);
template Model<double> apply_mask(const Model<double>&, const ChannelMask&, std::optional<double>);
template Model<float> sparse_twin_of_sdense(const Model<float>&);
template Model<double> sparse_twin_of_sdense(const Model<double>&);

}  // namespace moelab
