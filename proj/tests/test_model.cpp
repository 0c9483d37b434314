// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "moelab/checkpoint.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "test_util.hpp"

using namespace moelab;
using testutil::random_tensor;

namespace {

ModelConfig tiny_cfg(Variant v, int n = 2, double r = 0.5, std::uint64_t seed = 0) {
  ModelConfig c;
  c.backbone = tiny_conv_net(3, 16, 16);
  c.variant = v;
  c.moe.num_experts = n;
  c.moe.model_scale = r;
  c.seed = seed;
  return c;
}

ModelConfig resnet_cfg(Variant v, int n = 2, double r = 0.5, std::uint64_t seed = 0) {
  ModelConfig c = tiny_cfg(v, n, r, seed);
  c.backbone = mini_resnet8(3, 16, 16);
  return c;
}

template <typename T>
Tensor<T> logits_of(const Model<T>& m, const Tensor<T>& x, ForwardOptions<T> o = {}, PathwayTrace* trace = nullptr) {
  Tape<T> tape;
  auto r = m.forward(tape, tape.constant(x), o);
  if (trace != nullptr) *trace = r.trace;
  return r.logits.value();
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(static_cast<double>(a[i]) - b[i]));
  return d;
}

}  // namespace

TEST_CASE("expert_partition worked examples") {
  auto p = expert_partition(64, 2, 0.5);
  REQUIRE(p.size() == 2);
  CHECK(p[0].front() == 0);
  CHECK(p[0].back() == 31);
  CHECK(p[1].front() == 32);
  CHECK(p[1].back() == 63);
  auto one = expert_partition(64, 1, 0.5);
  REQUIRE(one.size() == 1);
  CHECK(one[0].size() == 32);
  CHECK(one[0].front() == 0);
  auto four = expert_partition(64, 4, 0.5);
  REQUIRE(four.size() == 4);
  const int starts[] = {0, 11, 21, 32};
  for (int i = 0; i < 4; ++i) {
    CHECK(four[static_cast<std::size_t>(i)].front() == starts[i]);
    CHECK(four[static_cast<std::size_t>(i)].size() == 32);
  }
  CHECK_THROWS_AS(expert_partition(8, 2, 0.01), ContractError);
}

TEST_CASE("expert width rounds half to even") {
  CHECK(expert_width(5, 0.5) == 2);
  CHECK(expert_width(7, 0.5) == 4);
  CHECK(expert_width(16, 0.5) == 8);
  CHECK(expert_width(10, 0.25) == 2);
}

TEST_CASE("expert partitions are sorted, in range, and disjoint when N*e <= C") {
  for (int c : {3, 8, 16, 17, 64})
    for (int n : {1, 2, 3, 4})
      for (double r : {0.2, 0.25, 0.5, 0.8, 1.0}) {
        const int e = expert_width(c, r);
        if (e < 1) continue;
        const auto sets = expert_partition(c, n, r);
        std::vector<int> owner(static_cast<std::size_t>(c), -1);
        for (int i = 0; i < n; ++i) {
          const auto& s = sets[static_cast<std::size_t>(i)];
          CHECK(static_cast<int>(s.size()) == e);
          for (std::size_t k = 0; k < s.size(); ++k) {
            CHECK((s[k] >= 0 && s[k] < c));
            if (k > 0) CHECK(s[k] > s[k - 1]);
            if (n * e <= c) {
              CHECK(owner[static_cast<std::size_t>(s[k])] == -1);
              owner[static_cast<std::size_t>(s[k])] = i;
            }
          }
        }
      }
}

TEST_CASE("S-Dense shrinks every layer") {
  auto m = Model<float>::build(tiny_cfg(Variant::sdense));
  CHECK(m.unit_channels() == std::vector<int>{8, 16, 32, 32});
  auto d = Model<float>::build(tiny_cfg(Variant::dense));
  CHECK(d.unit_channels() == std::vector<int>{16, 32, 64, 64});
}

TEST_CASE("MoE backbone has the dense parameter count and routers add C_in*N + N each") {
  for (int n : {1, 2, 4}) {
    const auto moe = Model<float>::build(tiny_cfg(Variant::moe, n));
    const auto dense = Model<float>::build(tiny_cfg(Variant::dense));
    CHECK(moe.backbone().numel() == dense.backbone().numel());
    CHECK(dense_parameter_count(tiny_cfg(Variant::dense).backbone) == dense.backbone().numel());
    std::int64_t want = 0;
    int in = 3;
    for (const auto& u : tiny_cfg(Variant::dense).backbone.units) {
      want += static_cast<std::int64_t>(in) * n + n;
      in = u.out_channels;
    }
    CHECK(moe.routers().numel() == want);
    CHECK(moe.num_routers() == 4);
  }
  // Groups are disjoint by name.
  const auto moe = Model<float>::build(resnet_cfg(Variant::moe));
  for (const auto& r : moe.routers().params)
    for (const auto& b : moe.backbone().params) CHECK(r.name != b.name);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  const double a[] = {0.2, 0.9};
  const double t[] = {0.3, 0.3};
  const double t3[] = {-1.0, 2.0, 2.0};
  CHECK(argmax_lowest(a, 2) == 1);
  CHECK(argmax_lowest(t, 2) == 0);
  CHECK(argmax_lowest(t3, 3) == 1);
}

TEST_CASE("hard routing picks one expert per unit with normalized probabilities") {
  for (const auto& cfg : {tiny_cfg(Variant::moe, 3, 0.3), resnet_cfg(Variant::moe, 2, 0.5)}) {
    auto m = Model<double>::build(cfg);
    const auto x = random_tensor<double>(Shape{6, 3, 16, 16}, 3, 0.0, 1.0);
    ForwardOptions<double> o;
    o.record_activations = true;
    Tape<double> tape;
    auto r = m.forward(tape, tape.constant(x), o);
    const PathwayTrace& tr = r.trace;
    REQUIRE(tr.batch == 6);
    REQUIRE(tr.units == m.num_units());
    for (int b = 0; b < 6; ++b)
      for (int u = 0; u < tr.units; ++u) {
        const int e = tr.expert_at(b, u);
        CHECK((e >= 0 && e < cfg.moe.num_experts));
        double s = 0.0;
        std::vector<double> p;
        for (int i = 0; i < cfg.moe.num_experts; ++i) {
          CHECK(tr.prob_at(b, u, i) >= 0.0);
          s += tr.prob_at(b, u, i);
          p.push_back(tr.prob_at(b, u, i));
        }
        CHECK(std::fabs(s - 1.0) < 1e-6);
        CHECK(argmax_lowest(p.data(), static_cast<int>(p.size())) == e);
        // Activation instrumentation: only the chosen expert's channels are live.
        const Tensor<double>& act = r.activations[static_cast<std::size_t>(u)].value();
        const auto& chosen = m.partition()[static_cast<std::size_t>(u)][static_cast<std::size_t>(e)];
        const std::int64_t hw = static_cast<std::int64_t>(act.dim(2)) * act.dim(3);
        for (int c = 0; c < act.dim(1); ++c) {
          const bool in = std::binary_search(chosen.begin(), chosen.end(), c);
          if (in) continue;
          for (std::int64_t j = 0; j < hw; ++j) CHECK(act[(static_cast<std::int64_t>(b) * act.dim(1) + c) * hw + j] == 0.0);
        }
      }
  }
}

TEST_CASE("routing is deterministic") {
  auto m = Model<float>::build(resnet_cfg(Variant::moe));
  const auto x = random_tensor<float>(Shape{5, 3, 16, 16}, 4, 0.0, 1.0);
  PathwayTrace a, b;
  const auto la = logits_of(m, x, {}, &a);
  const auto lb = logits_of(m, x, {}, &b);
  CHECK(a.expert == b.expert);
  CHECK(la == lb);
}

TEST_CASE("with one expert, MoE, S-Dense and the expert-0 sparse model agree") {
  for (auto mk : {tiny_cfg, resnet_cfg}) {
    const auto x = random_tensor<double>(Shape{4, 3, 16, 16}, 5, 0.0, 1.0);
    auto moe = Model<double>::build(mk(Variant::moe, 1, 0.5, 3));
    auto sd = Model<double>::build(mk(Variant::sdense, 1, 0.5, 3));
    auto dense = Model<double>::build(mk(Variant::dense, 1, 0.5, 3));
    auto sparse = apply_mask(dense, expert_mask(moe.partition(), 0));
    for (NormMode nm : {NormMode::batch, NormMode::running}) {
      ForwardOptions<double> hard, soft;
      hard.norm = soft.norm = nm;
      soft.routing = RoutingMode::soft;
      const auto lm = logits_of(moe, x, hard);
      CHECK(lm == logits_of(moe, x, soft));
      CHECK(max_abs_diff(lm, logits_of(sd, x, hard)) < 1e-12);
      CHECK(lm == logits_of(sparse, x, hard));
    }
  }
}

TEST_CASE("near-tie gate probabilities route to expert 0 and match a slice oracle") {
  auto moe = Model<double>::build(tiny_cfg(Variant::moe, 2, 0.5, 11));
  // Zero router weights and a logit gap of 4e-6 give probs (0.5 + 1e-6, 0.5 - 1e-6).
  for (std::size_t i = 0; i < moe.routers().params.size(); ++i) {
    auto& p = moe.routers().params[i].value;
    p.fill(0.0);
    if (p.rank() == 1) p[0] = 4e-6;
  }
  const auto x = random_tensor<double>(Shape{3, 3, 16, 16}, 12, 0.0, 1.0);
  PathwayTrace tr;
  const auto l = logits_of(moe, x, {}, &tr);
  for (int b = 0; b < 3; ++b)
    for (int u = 0; u < tr.units; ++u) {
      CHECK(tr.expert_at(b, u) == 0);
      CHECK(tr.prob_at(b, u, 0) == doctest::Approx(0.5 + 1e-6).epsilon(1e-9));
    }
  // Expert 0 owns the leading channels, which are exactly the S-Dense weights.
  auto sd = Model<double>::build(tiny_cfg(Variant::sdense, 2, 0.5, 11));
  CHECK(max_abs_diff(l, logits_of(sd, x)) < 1e-12);
  ForwardOptions<double> forced;
  forced.forced_expert = 0;
  CHECK(l == logits_of(moe, x, forced));
}

TEST_CASE("hard-mode logits equal a pure hard-slice forward bit for bit") {
  auto moe = Model<double>::build(resnet_cfg(Variant::moe, 2, 0.5, 21));
  auto dense = Model<double>::build(resnet_cfg(Variant::dense, 2, 0.5, 21));
  for (int s = 0; s < 4; ++s) {
    const auto x = random_tensor<double>(Shape{1, 3, 16, 16}, 100 + static_cast<std::uint64_t>(s), 0.0, 1.0);
    PathwayTrace tr;
    const auto l = logits_of(moe, x, {}, &tr);
    ChannelMask path;
    for (int u = 0; u < tr.units; ++u)
      path.units.push_back(moe.partition()[static_cast<std::size_t>(u)][static_cast<std::size_t>(tr.expert_at(0, u))]);
    const auto sparse = apply_mask(dense, path);
    CHECK(l == logits_of(sparse, x));
  }
}

TEST_CASE("sparse variant: masks, sizes and the all-channel identity") {
  auto dense = Model<double>::build(tiny_cfg(Variant::dense, 2, 1.0));
  ChannelMask all;
  for (int c : dense.unit_channels()) {
    std::vector<int> s(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) s[static_cast<std::size_t>(i)] = i;
    all.units.push_back(s);
  }
  const auto x = random_tensor<double>(Shape{3, 3, 16, 16}, 7, 0.0, 1.0);
  const auto full = apply_mask(dense, all);
  for (NormMode nm : {NormMode::batch, NormMode::running}) {
    ForwardOptions<double> o;
    o.norm = nm;
    CHECK(logits_of(full, x, o) == logits_of(dense, x, o));
  }
  ChannelMask small = all;
  small.units[1].pop_back();
  CHECK_THROWS_AS(apply_mask(dense, small), ContractError);
  ChannelMask short_mask = all;
  short_mask.units.pop_back();
  CHECK_THROWS_AS(apply_mask(dense, short_mask), ContractError);
  ModelConfig no_mask = tiny_cfg(Variant::sparse);
  CHECK_THROWS_AS(Model<float>::build(no_mask), ContractError);
}

TEST_CASE("sparse twin of an S-Dense model reproduces its logits") {
  auto sd = Model<double>::build(resnet_cfg(Variant::sdense, 2, 0.5, 8));
  // Perturb so the twin cannot pass by reinitialization alone.
  for (auto& p : sd.backbone().params)
    for (auto& v : p.value.data()) v *= 1.01;
  const auto twin = sparse_twin_of_sdense(sd);
  const auto x = random_tensor<double>(Shape{3, 3, 16, 16}, 9, 0.0, 1.0);
  for (NormMode nm : {NormMode::batch, NormMode::running}) {
    ForwardOptions<double> o;
    o.norm = nm;
    CHECK(max_abs_diff(logits_of(sd, x, o), logits_of(twin, x, o)) < 1e-12);
  }
}

TEST_CASE("flops: single conv hand formula") {
  BackboneConfig b{"one", 8, 8, 8, 2, {{UnitSpec::Kind::plain, 8, 3, 1, 1}}};
  MoEConfig m;
  m.model_scale = 1.0;
  const double head = 8.0 * 8 * 8 + 2.0 * 8 * 2;
  CHECK(flops_estimate(b, Variant::dense, m, {}) - head == 73728.0);
  CHECK(flops_estimate(b, Variant::sdense, m, {}) - head == 73728.0);
}

TEST_CASE("flops: analytic estimate equals the instrumented count") {
  for (auto mk : {tiny_cfg, resnet_cfg})
    for (Variant v : {Variant::dense, Variant::sdense, Variant::moe, Variant::sparse})
      for (int n : {1, 2, 4}) {
        ModelConfig cfg = mk(v, n, 0.5, 1);
        if (v == Variant::sparse) {
          auto d = Model<float>::build(mk(Variant::dense, n, 0.5, 1));
          ChannelMask m;
          RngStream r(3, "mask");
          for (int c : d.unit_channels()) {
            auto perm = r.permutation(c);
            perm.resize(static_cast<std::size_t>(expert_width(c, 0.5)));
            std::sort(perm.begin(), perm.end());
            m.units.push_back(perm);
          }
          cfg.mask = m;
        }
        auto model = Model<float>::build(cfg);
        FlopTally tally;
        ForwardOptions<float> o;
        o.flops = &tally;
        logits_of(model, random_tensor<float>(Shape{5, 3, 16, 16}, 2, 0.0, 1.0), o);
        CHECK(tally.samples == 5);
        CHECK(tally.per_sample() == flops_estimate(cfg));
      }
}

TEST_CASE("flops ordering and ratios at r = 0.5") {
  for (auto mk : {tiny_cfg, resnet_cfg}) {
    const double dense = flops_estimate(mk(Variant::dense, 2, 0.5, 0));
    const double sd = flops_estimate(mk(Variant::sdense, 2, 0.5, 0));
    const double moe = flops_estimate(mk(Variant::moe, 2, 0.5, 0));
    CHECK(dense >= moe);
    CHECK(moe >= sd);
    CHECK(sd / dense >= 0.24);
    CHECK(sd / dense <= 0.32);
    // Router cost: pooling over the full-width unit input plus 2*C_in*N.
    const auto bb = mk(Variant::moe, 2, 0.5, 0).backbone;
    double router = 0.0;
    int h = bb.height, w = bb.width, in = bb.in_channels;
    for (const auto& u : bb.units) {
      router += static_cast<double>(h) * w * in + 2.0 * in * 2;
      h = (h + 2 * u.padding - u.kernel) / u.stride + 1;
      w = (w + 2 * u.padding - u.kernel) / u.stride + 1;
      in = u.out_channels;
    }
    CHECK(moe - sd == router);
  }
}

TEST_CASE("a random r = 0.5 mask costs exactly the S-Dense FLOPs") {
  auto d = Model<float>::build(resnet_cfg(Variant::dense));
  for (std::uint64_t s = 0; s < 5; ++s) {
    ChannelMask m;
    RngStream r(s, "mask");
    for (int c : d.unit_channels()) {
      auto perm = r.permutation(c);
      perm.resize(static_cast<std::size_t>(expert_width(c, 0.5)));
      std::sort(perm.begin(), perm.end());
      m.units.push_back(perm);
    }
    CHECK(flops_estimate(apply_mask(d, m).config()) == flops_estimate(resnet_cfg(Variant::sdense)));
  }
}

TEST_CASE("soft routing is differentiable end to end including routers") {
  ModelConfig cfg = tiny_cfg(Variant::moe, 2, 0.5, 0);
  cfg.backbone = tiny_conv_net(3, 8, 8, 3, {4, 6, 8, 8});
  cfg.moe.routing = RoutingMode::soft;
  auto m = Model<double>::build(cfg);
  const auto x = random_tensor<double>(Shape{4, 3, 8, 8}, 1, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 1};
  GradCheckOptions opt;
  opt.tolerance = 1e-4;
  opt.min_coordinates = 100;
  const auto r = testutil::model_grad_check(m, x, y, opt);
  CHECK_MESSAGE(r.pass, "err ", r.max_rel_error, " at ", r.worst);
}

TEST_CASE("hard routing sends straight-through gradients to the routers") {
  auto m = Model<double>::build(tiny_cfg(Variant::moe));
  const auto x = random_tensor<double>(Shape{4, 3, 16, 16}, 1, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 1};
  Tape<double> tape;
  ForwardOptions<double> o;
  o.grad_routers = true;
  auto r = m.forward(tape, tape.constant(x), o);
  tape.backward(cross_entropy(r.logits, std::span<const int>(y)));
  double norm = 0.0;
  for (const auto& v : r.router_vars)
    for (double g : tape.grad(v).data()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("running-stat update skips channels without contributors") {
  auto m = Model<float>::build(tiny_cfg(Variant::moe, 2, 0.5));
  const auto before = m.buffers();
  ForwardOptions<float> o;
  o.norm = NormMode::batch;
  o.forced_expert = 1;
  Tape<float> tape;
  auto r = m.forward(tape, tape.constant(random_tensor<float>(Shape{4, 3, 16, 16}, 3, 0.0, 1.0)), o);
  m.update_running_stats(r, 0.1);
  // Unit 0 mean buffer: expert 0 channels [0, 8) untouched, expert 1 channels moved.
  const Tensor<float>& mean0 = m.buffers()[0];
  for (int c = 0; c < 8; ++c) CHECK(mean0[c] == before[0][c]);
  bool moved = false;
  for (int c = 8; c < 16; ++c) moved |= mean0[c] != before[0][c];
  CHECK(moved);
}

TEST_CASE("input shape and routing-mode validation") {
  auto m = Model<float>::build(tiny_cfg(Variant::moe));
  Tape<float> tape;
  CHECK_THROWS_AS(m.forward(tape, tape.constant(Tensor<float>(Shape{2, 3, 8, 8})), {}), ContractError);
  CHECK_THROWS_AS(parse_routing_mode("top2"), ContractError);
  CHECK(parse_routing_mode("soft") == RoutingMode::soft);
}

TEST_CASE("checkpoint round trip and format errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "moelab_test_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "m.bin").string();
  auto m = Model<float>::build(resnet_cfg(Variant::moe, 3, 0.4, 5));
  m.buffers()[0][0] = 0.75f;
  save_checkpoint(path, m, {{"note", "x"}});
  {
    std::ifstream f(path, std::ios::binary);
    char magic[8];
    f.read(magic, 8);
    CHECK(std::string(magic, 8) == "ADVMOE01");
  }
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.extra["note"] == "x");
  CHECK(ck.model.router_checksum() == m.router_checksum());
  CHECK(ck.model.backbone_checksum() == m.backbone_checksum());
  CHECK(ck.model.partition() == m.partition());
  const auto x = random_tensor<float>(Shape{2, 3, 16, 16}, 1, 0.0, 1.0);
  CHECK(logits_of(ck.model, x) == logits_of(m, x));

  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << b;
  };
  std::string bad = bytes;
  bad[3] = 'X';
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  bad = bytes;
  bad[8] = 2;
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("model config survives JSON") {
  ModelConfig c = resnet_cfg(Variant::sparse);
  c.mask = ChannelMask{{{0, 1}, {2}, {3, 4}, {5}}};
  const ModelConfig back = model_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
}

TEST_CASE("casting between precisions preserves parameters") {
  auto m = Model<float>::build(resnet_cfg(Variant::moe));
  auto back = m.cast<double>().cast<float>();
  CHECK(back.backbone_checksum() == m.backbone_checksum());
  CHECK(back.router_checksum() == m.router_checksum());
}
