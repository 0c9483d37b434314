// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance harness. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Progress goes to stderr.
//
// Environment:
//   MOELAB_CLI          path of the moelab executable (criterion 10)
//   MOELAB_ACCEPT_DIR   scratch directory (default: <tmp>/moelab_acceptance)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/analysis.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/experiment.hpp"
#include "moelab/grad_check.hpp"
#include "moelab/training.hpp"
#include "test_util.hpp"

using namespace moelab;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, Outcome> results;
const char* const kNames[] = {"",
                              "gradient correctness",
                              "attack invariants",
                              "TRADES degeneracy at eps = 0",
                              "alternation isolation",
                              "FLOP accounting",
                              "dissection partition",
                              "ordering: advmoe vs joint AT and S-Dense AT",
                              "ordering: undefended < router-only < advmoe",
                              "IoU sanity",
                              "determinism of train"};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void note(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

template <typename F>
void criterion(int id, F&& body) {
  const auto t0 = Clock::now();
  note("criterion " + std::to_string(id) + ": " + kNames[id]);
  try {
    results[id] = body();
  } catch (const std::exception& e) {
    results[id] = {false, std::string("exception: ") + e.what()};
  }
  results[id].detail += " [" + fmt(seconds_since(t0), 3) + " s]";
}

fs::path scratch() {
  const char* d = std::getenv("MOELAB_ACCEPT_DIR");
  static const fs::path p = d != nullptr ? fs::path(d) : fs::temp_directory_path() / "moelab_acceptance";
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  ModelConfig c;
  c.backbone = tiny_conv_net(3, 16, 16);
  c.variant = Variant::moe;
  c.moe.num_experts = 2;
  c.moe.model_scale = 0.5;
  c.moe.routing = RoutingMode::soft;
  c.seed = 1;
  auto m = Model<double>::build(c);
  const auto x = testutil::random_tensor<double>(Shape{4, 3, 16, 16}, 17, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 1};
  GradCheckOptions opt;
  opt.tolerance = 1e-4;
  opt.min_coordinates = 400;
  const auto t0 = Clock::now();
  const auto r = testutil::model_grad_check(m, x, y, opt);
  const double secs = seconds_since(t0);
  return {r.pass && secs < 120.0, "max rel err " + fmt(r.max_rel_error) + " over " + std::to_string(r.coordinates) +
                                      " coordinates (tol 1e-4), " + fmt(secs, 3) + " s (limit 120 s)"};
}

Outcome attack_invariants() {
  ModelConfig c;
  c.backbone = tiny_conv_net(3, 8, 8, 3, {8, 8, 16, 16});
  c.variant = Variant::moe;
  c.moe.num_experts = 2;
  c.moe.model_scale = 0.5;
  const auto m = Model<float>::build(c);
  const auto rsum = m.router_checksum(), bsum = m.backbone_checksum();
  const double eps = 8.0 / 255.0;
  int calls = 0, violations = 0, zero_violations = 0;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto x = testutil::random_tensor<float>(Shape{4, 3, 8, 8}, s, 0.0, 1.0);
    // Saturated pixels exercise the box constraint.
    for (std::int64_t i = 0; i < x.size(); i += 7) x[i] = (i / 7) % 2 ? 1.0f : 0.0f;
    const std::vector<int> y{static_cast<int>(s % 3), 0, 1, 2};
    AttackConfig a;
    a.epsilon = eps;
    a.steps = s % 2 == 0 ? 2 : 50;
    a.init = s % 3 == 0 ? AttackInit::uniform : (s % 3 == 1 ? AttackInit::small_gauss : AttackInit::zero);
    RngStream rng(s, "acceptance");
    const auto d = pgd(m, x, y, a, nullptr, rng);
    ++calls;
    for (std::int64_t i = 0; i < d.size(); ++i) {
      const double di = d[i], xi = x[i];
      worst = std::max(worst, std::fabs(di));
      if (std::fabs(di) > eps + 1e-12 || xi + di < 0.0 || xi + di > 1.0) ++violations;
    }
  }
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = testutil::random_tensor<float>(Shape{4, 3, 8, 8}, 5000 + s, 0.0, 1.0);
    const std::vector<int> y{0, 1, 2, 0};
    AttackConfig a;
    a.epsilon = 0.0;
    a.steps = 10;
    a.init = AttackInit::zero;
    RngStream rng(s, "acceptance");
    const auto d = pgd(m, x, y, a, nullptr, rng);
    for (float v : d.data()) zero_violations += v != 0.0f;
  }
  const bool unchanged = m.router_checksum() == rsum && m.backbone_checksum() == bsum;
  return {violations == 0 && zero_violations == 0 && unchanged,
          std::to_string(calls) + " calls, " + std::to_string(violations) + " budget/box violations, max |delta| " +
              fmt(worst, 10) + " (eps " + fmt(eps, 10) + "), eps=0 nonzero entries " +
              std::to_string(zero_violations) + ", parameters " + (unchanged ? "unchanged" : "CHANGED")};
}

Outcome trades_degeneracy() {
  ModelConfig c;
  c.backbone = mini_resnet8(3, 16, 16);
  c.variant = Variant::moe;
  c.moe.num_experts = 2;
  c.moe.model_scale = 0.5;
  const auto m = Model<float>::build(c);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = testutil::random_tensor<float>(Shape{8, 3, 16, 16}, 900 + s, 0.0, 1.0);
    std::vector<int> y(8);
    for (int i = 0; i < 8; ++i) y[static_cast<std::size_t>(i)] = static_cast<int>((s + static_cast<std::uint64_t>(i)) % 3);
    TradesOptions o;
    o.attack.epsilon = 0.0;
    ForwardOptions<float> fo;
    fo.norm = NormMode::batch;
    RngStream rng(s, "acceptance");
    Tape<float> tape;
    const double loss = trades_loss(tape, m, x, y, fo, o, rng).loss.value().item();
    Tape<float> t2;
    const double ce = cross_entropy(m.forward(t2, t2.constant(x), fo).logits, std::span<const int>(y)).value().item();
    worst = std::max(worst, std::fabs(loss - ce));
  }
  return {worst <= 1e-7, "100 batches, max |trades - ce| = " + fmt(worst) + " (tol 1e-7)"};
}

Outcome flop_accounting() {
  int checked = 0, mismatched = 0;
  std::string ratios;
  bool ratio_ok = true, router_ok = true;
  for (int arch = 0; arch < 2; ++arch) {
    const BackboneConfig bb = arch == 0 ? tiny_conv_net(3, 16, 16) : mini_resnet8(3, 16, 16);
    for (Variant v : {Variant::dense, Variant::sdense, Variant::moe, Variant::sparse})
      for (int n : {1, 2, 4})
        for (double r : {0.25, 0.5, 1.0}) {
          ModelConfig mc;
          mc.backbone = bb;
          mc.variant = v;
          mc.moe.num_experts = n;
          mc.moe.model_scale = r;
          if (v == Variant::sparse) {
            ChannelMask mask;
            RngStream rng(static_cast<std::uint64_t>(n), "mask");
            for (const auto& u : bb.units) {
              auto p = rng.permutation(u.out_channels);
              p.resize(static_cast<std::size_t>(expert_width(u.out_channels, r)));
              std::sort(p.begin(), p.end());
              mask.units.push_back(p);
            }
            mc.mask = mask;
          }
          const auto model = Model<float>::build(mc);
          FlopTally tally;
          ForwardOptions<float> o;
          o.flops = &tally;
          Tape<float> tape;
          model.forward(tape, tape.constant(testutil::random_tensor<float>(Shape{3, 3, 16, 16}, 4, 0.0, 1.0)), o);
          ++checked;
          mismatched += tally.per_sample() != flops_estimate(mc);
        }
    ModelConfig d, s, m;
    d.backbone = s.backbone = m.backbone = bb;
    d.variant = Variant::dense;
    s.variant = Variant::sdense;
    m.variant = Variant::moe;
    const double fd = flops_estimate(d), fs_ = flops_estimate(s), fm = flops_estimate(m);
    const double ratio = fs_ / fd;
    ratio_ok &= ratio >= 0.24 && ratio <= 0.32;
    // Router cost: pool each unit input at full width, then a C_in x N linear.
    double router = 0.0;
    int h = bb.height, w = bb.width, in = bb.in_channels;
    for (const auto& u : bb.units) {
      router += static_cast<double>(h) * w * in + 2.0 * in * m.moe.num_experts;
      h = (h + 2 * u.padding - u.kernel) / u.stride + 1;
      w = (w + 2 * u.padding - u.kernel) / u.stride + 1;
      in = u.out_channels;
    }
    router_ok &= fm - fs_ == router;
    ratios += std::string(arch == 0 ? "tiny" : "resnet8") + ": dense " + fmt(fd / 1e9, 6) + " / moe " + fmt(fm / 1e9, 6) + " / sdense " +
              fmt(fs_ / 1e9, 6) + " GFLOPs, sdense/dense " + fmt(ratio) + "; ";
  }
  return {mismatched == 0 && ratio_ok && router_ok,
          std::to_string(checked - mismatched) + "/" + std::to_string(checked) + " instrumented==analytic; " + ratios +
              "moe - sdense == router cost: " + (router_ok ? "yes" : "NO")};
}

// ---------------------------------------------------------------------------
// Desk-scale runs shared by criteria 4, 6, 7, 8 and 9.

const int kSeeds = 3;
const char* const kMethods[] = {"standard", "router_only", "moe_at", "advmoe", "sdense"};

struct DeskRun {
  double sa = 0.0, ra = 0.0;
  TrainHistory history;
  std::string checkpoint;
};

std::map<std::string, std::vector<DeskRun>> desk;
std::string desk_error;

json desk_document(const std::string& method, std::uint64_t seed, const fs::path& out) {
  return json{{"seed", seed},
              {"method", method},
              {"output_dir", out.string()},
              {"data", {{"num_classes", 3}, {"train_per_class", 500}, {"test_per_class", 200}, {"height", 16}, {"width", 16}}},
              {"backbone", {{"arch", "resnet8"}}},
              {"moe", {{"num_experts", 2}, {"model_scale", 0.5}}},
              {"train", {{"epochs", 30}, {"batch_size", 64}, {"eval_every", 0}}},
              {"attack_train", {{"epsilon", 8.0 / 255.0}, {"steps", 2}}},
              {"attack_eval", {{"epsilon", 8.0 / 255.0}, {"steps", 20}}}};
}

void run_desk() {
  const auto t0 = Clock::now();
  for (int s = 0; s < kSeeds; ++s)
    for (const char* method : kMethods) {
      const fs::path out = scratch() / "desk" / (std::string(method) + "_s" + std::to_string(s));
      json doc = desk_document(method, static_cast<std::uint64_t>(s), out);
      if (std::string(method) == "router_only")
        doc["train"]["pretrained"] = desk["standard"][static_cast<std::size_t>(s)].checkpoint;
      const auto t1 = Clock::now();
      const RunResult r = run_experiment(ExperimentConfig::from_json(doc), out.string());
      desk[method].push_back({r.eval.sa, r.eval.ra, r.history, (out / "checkpoint.bin").string()});
      note(std::string(method) + " seed " + std::to_string(s) + ": SA " + fmt(r.eval.sa) + " RA " + fmt(r.eval.ra) +
           " (" + fmt(seconds_since(t1), 3) + " s)");
    }
  note("desk runs finished in " + fmt(seconds_since(t0) / 60.0, 3) + " min");
}

double mean_ra(const std::string& m) {
  double s = 0.0;
  for (const auto& r : desk.at(m)) s += r.ra;
  return s / static_cast<double>(desk.at(m).size());
}

std::string per_seed(const std::string& m) {
  std::string s;
  for (const auto& r : desk.at(m)) s += (s.empty() ? "" : "/") + fmt(r.ra);
  return s;
}

Outcome alternation_isolation() {
  if (!desk_error.empty()) return {false, "desk run failed: " + desk_error};
  const int iters = (1500 + 63) / 64;
  const std::int64_t expected = static_cast<std::int64_t>(30) * iters;
  bool ok = true;
  std::string counts;
  for (const auto& r : desk.at("advmoe")) {
    ok &= r.history.lower_checks == expected && r.history.upper_checks == expected;
    counts += std::to_string(r.history.lower_checks) + "+" + std::to_string(r.history.upper_checks) + " ";
  }
  return {ok, "checksum-verified lower+upper steps per seed: " + counts + "(expected " + std::to_string(expected) +
                  " each); any violation aborts training"};
}

Outcome dissection_partition() {
  if (!desk_error.empty()) return {false, "desk run failed: " + desk_error};
  bool ok = true;
  std::string detail;
  for (const char* method : {"advmoe", "standard"}) {
    const Checkpoint ck = load_checkpoint(desk.at(method)[0].checkpoint);
    const ExperimentConfig cfg = checkpoint_experiment(ck.extra);
    const Dataset test = cfg.test_data();
    const AttackPass pass = attack_pass(ck.model, test, cfg.eval_attack(), cfg.seed());
    const DissectionReport d = dissect_report(pass);
    const EvalReport e = eval_report(pass);
    const double sum = d.f1 + d.f2 + d.f3 + d.f4;
    const double pr_gap = std::fabs(d.prediction_robustness() - e.ra / 100.0);
    AttackConfig zero = cfg.eval_attack();
    zero.epsilon = 0.0;
    const AttackPass zp = attack_pass(ck.model, test, zero, cfg.seed());
    const DissectionReport z = dissect_report(zp);
    const double sa = eval_report(zp).sa / 100.0;
    const double zgap = std::max({std::fabs(z.f1 - sa), std::fabs(z.f2), std::fabs(z.f3 - (1.0 - sa)), std::fabs(z.f4)});
    ok &= std::fabs(sum - 1.0) <= 1e-9 && pr_gap <= 1e-9 && zgap <= 1e-9;
    detail += std::string(method) + ": f=(" + fmt(d.f1) + "," + fmt(d.f2) + "," + fmt(d.f3) + "," + fmt(d.f4) +
              ") sum-1=" + fmt(sum - 1.0) + ", |f1+f2-RA|=" + fmt(pr_gap) + ", eps=0 gap " + fmt(zgap) +
              ", router robustness " + fmt(d.router_robustness()) + "; ";
  }
  return {ok, detail};
}

Outcome table_ordering() {
  if (!desk_error.empty()) return {false, "desk run failed: " + desk_error};
  const double adv = mean_ra("advmoe"), joint = mean_ra("moe_at"), sd = mean_ra("sdense");
  return {adv >= joint && adv >= sd - 1.0,
          "mean RA advmoe " + fmt(adv) + " [" + per_seed("advmoe") + "] vs moe_at " + fmt(joint) + " [" +
              per_seed("moe_at") + "] vs sdense " + fmt(sd) + " [" + per_seed("sdense") + "] (need advmoe >= moe_at and >= sdense - 1)"};
}

Outcome router_only_ordering() {
  if (!desk_error.empty()) return {false, "desk run failed: " + desk_error};
  const double und = mean_ra("standard"), ro = mean_ra("router_only"), adv = mean_ra("advmoe");
  return {und < ro && ro < adv, "mean RA undefended " + fmt(und) + " [" + per_seed("standard") + "] < router-only " +
                                    fmt(ro) + " [" + per_seed("router_only") + "] < advmoe " + fmt(adv)};
}

Outcome iou_sanity() {
  if (!desk_error.empty()) return {false, "desk run failed: " + desk_error};
  const Checkpoint ck = load_checkpoint(desk.at("advmoe")[0].checkpoint);
  const ExperimentConfig cfg = checkpoint_experiment(ck.extra);
  const Dataset test = cfg.test_data();
  const AttackPass pass = attack_pass(ck.model, test, cfg.eval_attack(), cfg.seed());
  int self_bad = 0;
  for (int i = 0; i < pass.size(); ++i)
    for (const PathwayTrace* t : {&pass.clean_trace, &pass.adv_trace}) {
      const ChannelPairs p = pathway_pairs(ck.model.partition(), *t, i);
      self_bad += iou(p, p) != 1.0;
    }
  // Against the expert-0 mask and a random mask of the same size.
  ChannelMask random;
  RngStream rng(0, "iou-mask");
  for (const auto& unit : ck.model.partition()) {
    const int c = ck.model.unit_channels()[random.units.size()];
    auto p = rng.permutation(c);
    p.resize(unit[0].size());
    std::sort(p.begin(), p.end());
    random.units.push_back(p);
  }
  int out_of_range = 0;
  bool totals_ok = true;
  std::string means;
  for (const ChannelMask& mask : {expert_mask(ck.model.partition(), 0), random}) {
    const auto res = pathway_iou(ck.model, mask, test, cfg.eval_attack(), cfg.seed());
    for (const std::string split : {"clean", "adversarial"}) {
      std::vector<double> v;
      for (const auto& r : res)
        if (r.split == split) v.push_back(r.iou);
      for (double x : v) out_of_range += !(x >= 0.0 && x <= 1.0);
      totals_ok &= histogram(v).total() == static_cast<std::int64_t>(v.size()) &&
                   static_cast<int>(v.size()) == test.size();
      double m = 0.0;
      for (double x : v) m += x;
      means += split + " mean " + fmt(m / static_cast<double>(v.size())) + " ";
    }
  }
  return {self_bad == 0 && out_of_range == 0 && totals_ok,
          "self-IoU != 1: " + std::to_string(self_bad) + ", out of [0,1]: " + std::to_string(out_of_range) +
              ", histogram totals " + (totals_ok ? "match" : "MISMATCH") + "; " + means};
}

Outcome determinism() {
  const char* cli = std::getenv("MOELAB_CLI");
  if (cli == nullptr) return {false, "MOELAB_CLI is not set"};
  const fs::path dir = scratch() / "determinism";
  fs::create_directories(dir);
  json doc = {{"seed", 5},
              {"method", "advmoe"},
              {"output_dir", (dir / "run").string()},
              {"data", {{"train_per_class", 40}, {"test_per_class", 20}}},
              {"backbone", {{"arch", "resnet8"}}},
              {"train", {{"epochs", 2}, {"batch_size", 32}, {"eval_every", 1}, {"checkpoint_every", 1}}},
              {"attack_eval", {{"steps", 5}}}};
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << doc.dump(2);
  const std::vector<std::string> files = {"metrics.csv", "checkpoint.bin", "checkpoint_e1.bin"};
  std::vector<std::string> first;
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(dir / "run");
    const std::string cmd = std::string(cli) + " train --config " + cfg.string() + " >/dev/null";
    const int st = std::system(cmd.c_str());
    if (!WIFEXITED(st) || WEXITSTATUS(st) != 0) return {false, "train exited abnormally"};
    for (std::size_t i = 0; i < files.size(); ++i) {
      const std::string b = slurp(dir / "run" / files[i]);
      if (run == 0)
        first.push_back(b);
      else if (b != first[i])
        return {false, files[i] + " differs between runs"};
    }
  }
  return {true, "metrics.csv, checkpoint.bin and checkpoint_e1.bin byte-identical across two runs"};
}

}  // namespace

int main() {
  fs::create_directories(scratch());
  criterion(1, gradient_correctness);
  criterion(2, attack_invariants);
  criterion(3, trades_degeneracy);
  criterion(5, flop_accounting);
  criterion(10, determinism);
  {
    note("desk-scale runs: 3 seeds x {standard, router_only, moe_at, advmoe, sdense}");
    try {
      run_desk();
    } catch (const std::exception& e) {
      desk_error = e.what();
    }
  }
  criterion(4, alternation_isolation);
  criterion(6, dissection_partition);
  criterion(7, table_ordering);
  criterion(8, router_only_ordering);
  criterion(9, iou_sanity);

  int failed = 0;
  for (int id = 1; id <= 10; ++id) {
    const Outcome& o = results.at(id);
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << kNames[id] << "): " << o.detail
              << std::endl;
  }
  std::cout << (failed == 0 ? "ALL 10 CRITERIA PASS" : std::to_string(failed) + " CRITERIA FAILED") << std::endl;
  return failed == 0 ? 0 : 1;
}
