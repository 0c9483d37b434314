// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace moelab {

namespace {

std::vector<int> predictions(const Tensor<float>& logits) {
  const int b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(b));
  std::vector<double> row(static_cast<std::size_t>(k));
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < k; ++j) row[static_cast<std::size_t>(j)] = logits[static_cast<std::int64_t>(i) * k + j];
    out[static_cast<std::size_t>(i)] = argmax_lowest(row.data(), k);
  }
  return out;
}

void append(PathwayTrace& dst, const PathwayTrace& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
    return;
  }
  MOELAB_REQUIRE(dst.units == src.units && dst.num_experts == src.num_experts, "trace layout mismatch");
  dst.batch += src.batch;
  dst.expert.insert(dst.expert.end(), src.expert.begin(), src.expert.end());
  dst.probs.insert(dst.probs.end(), src.probs.begin(), src.probs.end());
}

}  // namespace

AttackPass attack_pass(const TracedFn& f, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size) {
  MOELAB_REQUIRE(data.size() > 0, "evaluation needs a non-empty dataset");
  MOELAB_REQUIRE(batch_size >= 1, "evaluation batch size must be >= 1");
  AttackConfig acfg = cfg;
  acfg.objective = AttackObjective::ce;
  acfg.validate();
  AttackPass pass;
  pass.attack = acfg;
  const RngStream streams = RngStream(seed, "attack").child("eval");
  LogitFn<float> logits_only = [&](Tape<float>& tape, Var<float> in) { return f(tape, in).logits; };
  for (int begin = 0, j = 0; begin < data.size(); begin += batch_size, ++j) {
    const int end = std::min(data.size(), begin + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const Tensor<float> x = data.gather_images(idx);
    const std::vector<int> y = data.gather_labels(idx);
    {
      Tape<float> tape;
      TracedLogits c = f(tape, tape.constant(x));
      const auto p = predictions(c.logits.value());
      pass.clean_pred.insert(pass.clean_pred.end(), p.begin(), p.end());
      append(pass.clean_trace, c.trace);
    }
    RngStream rng = streams.child(static_cast<std::uint64_t>(j));
    const Tensor<float> delta = pgd<float>(logits_only, x, std::span<const int>(y), acfg, nullptr, rng);
    Tensor<float> xadv = x;
    for (std::int64_t i = 0; i < xadv.size(); ++i) xadv[i] += delta[i];
    {
      Tape<float> tape;
      TracedLogits a = f(tape, tape.constant(std::move(xadv)));
      const auto p = predictions(a.logits.value());
      pass.adv_pred.insert(pass.adv_pred.end(), p.begin(), p.end());
      append(pass.adv_trace, a.trace);
    }
    pass.labels.insert(pass.labels.end(), y.begin(), y.end());
  }
  return pass;
}

AttackPass attack_pass(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       int batch_size) {
  ForwardOptions<float> opt;
  opt.routing = model.config().moe.routing;
  opt.norm = NormMode::running;
  TracedFn f = [&](Tape<float>& tape, Var<float> in) {
    ForwardResult<float> r = model.forward(tape, in, opt);
    return TracedLogits{r.logits, std::move(r.trace)};
  };
  return attack_pass(f, data, cfg, seed, batch_size);
}

EvalReport eval_report(const AttackPass& pass) {
  MOELAB_REQUIRE(pass.size() > 0, "evaluation needs a non-empty dataset");
  int clean = 0, robust = 0;
  for (int i = 0; i < pass.size(); ++i) {
    clean += pass.clean_pred[static_cast<std::size_t>(i)] == pass.labels[static_cast<std::size_t>(i)];
    robust += pass.adv_pred[static_cast<std::size_t>(i)] == pass.labels[static_cast<std::size_t>(i)];
  }
  const double n = pass.size();
  return EvalReport{100.0 * clean / n, 100.0 * robust / n, pass.size(), pass.attack};
}

EvalReport evaluate(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                    int batch_size) {
  return eval_report(attack_pass(model, data, cfg, seed, batch_size));
}

DissectionReport dissect_report(const AttackPass& pass) {
  MOELAB_REQUIRE(pass.size() > 0, "dissection needs a non-empty dataset");
  MOELAB_REQUIRE(!pass.clean_trace.empty() && pass.clean_trace.batch == pass.size() &&
                     pass.adv_trace.batch == pass.size(),
                 "dissection needs pathway traces (MoE model)");
  std::int64_t c[4] = {0, 0, 0, 0};
  for (int i = 0; i < pass.size(); ++i) {
    const bool routed_away = !pass.clean_trace.same_pathway(i, pass.adv_trace, i);
    const bool wrong = pass.adv_pred[static_cast<std::size_t>(i)] != pass.labels[static_cast<std::size_t>(i)];
    ++c[(wrong ? 2 : 0) + (routed_away ? 1 : 0)];
  }
  const double n = pass.size();
  return DissectionReport{c[0] / n, c[1] / n, c[2] / n, c[3] / n, pass.size()};
}

DissectionReport dissect(const Model<float>& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                         int batch_size) {
  MOELAB_REQUIRE(model.variant() == Variant::moe, "dissection needs an MoE model, got " + to_string(model.variant()));
  return dissect_report(attack_pass(model, data, cfg, seed, batch_size));
}

// ---------------------------------------------------------------------------

double iou(const ChannelPairs& a, const ChannelPairs& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter, ++i, ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

ChannelPairs mask_pairs(const ChannelMask& mask) {
  ChannelPairs out;
  for (std::size_t u = 0; u < mask.units.size(); ++u)
    for (int c : mask.units[u]) out.emplace_back(static_cast<int>(u), c);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ChannelPairs pathway_pairs(const ExpertPartition& partition, const PathwayTrace& trace, int sample) {
  MOELAB_REQUIRE(static_cast<int>(partition.size()) == trace.units, "partition/trace unit count mismatch");
  ChannelMask m;
  for (int u = 0; u < trace.units; ++u)
    m.units.push_back(partition[static_cast<std::size_t>(u)].at(static_cast<std::size_t>(trace.expert_at(sample, u))));
  return mask_pairs(m);
}

std::vector<IoUResult> pathway_iou(const Model<float>& moe, const ChannelMask& mask, const Dataset& data,
                                   const std::optional<AttackConfig>& attack, std::uint64_t seed, int batch_size) {
  MOELAB_REQUIRE(moe.variant() == Variant::moe, "pathway IoU needs an MoE model");
  MOELAB_REQUIRE(static_cast<int>(mask.units.size()) == moe.num_units(),
                 "mask has " + std::to_string(mask.units.size()) + " layers, model routes " +
                     std::to_string(moe.num_units()));
  mask.validate(moe.unit_channels());
  AttackConfig cfg = attack.value_or(AttackConfig{0.0, 0, 0.0, AttackObjective::ce, AttackInit::zero});
  const AttackPass pass = attack_pass(moe, data, cfg, seed, batch_size);
  const ChannelPairs m = mask_pairs(mask);
  std::vector<IoUResult> out;
  for (int i = 0; i < pass.size(); ++i) out.push_back({i, "clean", iou(pathway_pairs(moe.partition(), pass.clean_trace, i), m)});
  if (attack)
    for (int i = 0; i < pass.size(); ++i)
      out.push_back({i, "adversarial", iou(pathway_pairs(moe.partition(), pass.adv_trace, i), m)});
  return out;
}

std::int64_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

Histogram histogram(std::span<const double> values, int bins, double lo, double hi) {
  MOELAB_REQUIRE(bins >= 1 && hi > lo, "histogram needs bins >= 1 and hi > lo");
  Histogram h;
  for (int i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * i / bins);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    MOELAB_REQUIRE(v >= lo && v <= hi, "histogram value " + format_number(v) + " outside range");
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    b = std::clamp(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

void write_histogram_csv(std::ostream& os, const Histogram& h, const std::string& split) {
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    os << split << ',' << format_number(h.edges[i]) << ',' << format_number(h.edges[i + 1]) << ',' << h.counts[i]
       << '\n';
}

// ---------------------------------------------------------------------------

bool method_uses_experts(const std::string& method) {
  return method == "moe_at" || method == "advmoe" || method == "router_only" || method == "standard";
}

std::vector<SweepCell> sweep_grid(const std::vector<std::string>& methods, const std::vector<int>& num_experts,
                                  const std::vector<double>& model_scales, const std::vector<std::uint64_t>& seeds) {
  MOELAB_REQUIRE(!methods.empty() && !num_experts.empty() && !model_scales.empty() && !seeds.empty(),
                 "sweep grid has an empty axis");
  std::vector<SweepCell> grid;
  for (const auto& m : methods) {
    const std::vector<int> ns = method_uses_experts(m) ? num_experts : std::vector<int>{1};
    for (int n : ns)
      for (double r : model_scales)
        for (std::uint64_t s : seeds) grid.push_back({m, n, r, s});
  }
  return grid;
}

std::vector<SweepRow> run_sweep(const std::vector<SweepCell>& grid,
                                const std::function<SweepRow(const SweepCell&)>& run) {
  MOELAB_REQUIRE(!grid.empty(), "sweep grid is empty");
  std::vector<SweepRow> rows;
  for (const auto& c : grid) rows.push_back(run(c));
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "method,N,r,seed,sa,ra,gflops\n";
  for (const auto& r : rows)
    os << r.cell.method << ',' << r.cell.num_experts << ',' << format_number(r.cell.model_scale) << ','
       << r.cell.seed << ',' << format_number(r.sa) << ',' << format_number(r.ra) << ',' << format_number(r.gflops)
       << '\n';
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace moelab
