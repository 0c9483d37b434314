// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "moelab/checkpoint.hpp"
#include "moelab/errors.hpp"

namespace moelab {

using nlohmann::json;
namespace fs = std::filesystem;

json default_experiment_document() {
  const double eps = 8.0 / 255.0;
  return json{
      {"seed", std::uint64_t{0}},
      {"method", "advmoe"},
      {"output_dir", "runs/default"},
      {"data",
       {{"source", "synthetic"},
        {"num_classes", 3},
        {"train_per_class", 500},
        {"test_per_class", 200},
        {"channels", 3},
        {"height", 16},
        {"width", 16},
        {"noise_sigma", 0.1},
        {"amplitude", 0.1},
        {"train_path", ""},
        {"test_path", ""},
        {"max_train", 0},
        {"max_test", 0}}},
      {"backbone", {{"arch", "resnet8"}, {"widths", json::array()}}},
      {"moe", {{"num_experts", 2}, {"model_scale", 0.5}, {"routing", "hard"}, {"blocks_per_router", 1}}},
      {"train",
       {{"epochs", 30},
        {"batch_size", 64},
        {"lr", 0.1},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"trades_inv_lambda", 6.0},
        {"lower_steps", 1},
        {"frozen", json::array()},
        {"eval_every", 0},
        {"eval_samples", 0},
        {"eval_batch", 100},
        {"checkpoint_every", 0},
        {"pretrained", ""}}},
      {"attack_train", {{"epsilon", eps}, {"steps", 2}, {"step_size", 0.0}, {"init", "small_gauss"}, {"gauss_sigma", 1e-3}}},
      {"attack_eval", {{"epsilon", eps}, {"steps", 50}, {"step_size", 0.0}, {"init", "uniform"}, {"gauss_sigma", 1e-3}}},
      {"mask", {{"mask_epochs", 5}, {"finetune_epochs", 5}, {"score_init", "magnitude"}, {"score_lr", 0.1}}},
      {"sweep",
       {{"methods", json::array({"advmoe"})},
        {"num_experts", json::array({2})},
        {"model_scales", json::array({0.5})},
        {"seeds", json::array({0})}}},
  };
}

namespace {

enum class Kind { string, integer, unsigned_integer, number, boolean };

// Element kinds of the array-valued fields.
Kind array_element_kind(const std::string& path) {
  if (path == "train.frozen" || path == "sweep.methods") return Kind::string;
  if (path == "sweep.model_scales") return Kind::number;
  if (path == "sweep.seeds") return Kind::unsigned_integer;
  return Kind::integer;  // backbone.widths, sweep.num_experts
}

void check_scalar(Kind kind, const json& got, const std::string& path) {
  switch (kind) {
    case Kind::string:
      if (!got.is_string()) throw ConfigError(path, "expected a string");
      return;
    case Kind::boolean:
      if (!got.is_boolean()) throw ConfigError(path, "expected true or false");
      return;
    case Kind::integer:
      if (!got.is_number_integer()) throw ConfigError(path, "expected an integer");
      return;
    case Kind::unsigned_integer:
      if (!got.is_number_integer() || (got.is_number_integer() && !got.is_number_unsigned() && got.get<std::int64_t>() < 0))
        throw ConfigError(path, "expected a non-negative integer");
      return;
    case Kind::number:
      if (!got.is_number()) throw ConfigError(path, "expected a number");
      if (!std::isfinite(got.get<double>())) throw ConfigError(path, "must be finite");
      return;
  }
}

Kind kind_of(const json& def) {
  if (def.is_string()) return Kind::string;
  if (def.is_boolean()) return Kind::boolean;
  if (def.is_number_unsigned()) return Kind::unsigned_integer;
  if (def.is_number_integer()) return Kind::integer;
  return Kind::number;
}

void check_against(const json& def, const json& got, const std::string& path) {
  if (def.is_object()) {
    if (!got.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
    for (auto it = got.begin(); it != got.end(); ++it) {
      const std::string sub = path.empty() ? it.key() : path + "." + it.key();
      if (!def.contains(it.key())) throw ConfigError(sub, "unknown key");
      check_against(def.at(it.key()), it.value(), sub);
    }
  } else if (def.is_array()) {
    if (!got.is_array()) throw ConfigError(path, "expected an array");
    const Kind k = array_element_kind(path);
    for (std::size_t i = 0; i < got.size(); ++i) check_scalar(k, got[i], path + "[" + std::to_string(i) + "]");
  } else {
    check_scalar(kind_of(def), got, path);
  }
}

void merge_into(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

template <typename Fn>
void require_field(bool ok, const std::string& path, Fn&& message) {
  if (!ok) throw ConfigError(path, message());
}

void require_in(const json& doc, const std::string& path, const std::vector<std::string>& allowed) {
  const json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) node = &node->at(part);
  const std::string v = node->get<std::string>();
  for (const auto& a : allowed)
    if (v == a) return;
  std::string list;
  for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
  throw ConfigError(path, "'" + v + "' is not one of {" + list + "}");
}

// Semantic checks beyond types.
void check_semantics(const ExperimentConfig& c) {
  const json& d = c.doc();
  require_in(d, "method", {"dense", "sdense", "sparse", "moe_at", "advmoe", "router_only", "standard"});
  require_in(d, "data.source", {"synthetic", "cifar10"});
  require_in(d, "backbone.arch", {"resnet8", "tiny"});
  require_in(d, "moe.routing", {"hard", "soft"});
  require_in(d, "attack_train.init", {"zero", "uniform", "small_gauss"});
  require_in(d, "attack_eval.init", {"zero", "uniform", "small_gauss"});
  require_in(d, "mask.score_init", {"magnitude", "constant"});
  for (const auto& g : d["train"]["frozen"])
    require_field(g == "routers" || g == "backbone", "train.frozen", [] { return "entries must be 'routers' or 'backbone'"; });
  for (const auto& m : d["sweep"]["methods"])
    require_field(m == "dense" || m == "sdense" || m == "sparse" || m == "moe_at" || m == "advmoe" ||
                      m == "router_only" || m == "standard",
                  "sweep.methods", [&] { return "unknown method '" + m.get<std::string>() + "'"; });
  const json& data = d["data"];
  for (const char* k : {"num_classes", "train_per_class", "test_per_class", "channels"})
    require_field(data[k].get<int>() >= 1, std::string("data.") + k, [] { return "must be >= 1"; });
  require_field(data["num_classes"].get<int>() >= 2, "data.num_classes", [] { return "must be >= 2"; });
  require_field(data["height"].get<int>() >= 8 && data["width"].get<int>() >= 8, "data.height",
                [] { return "synthetic images need height and width >= 8"; });
  require_field(data["noise_sigma"].get<double>() >= 0.0, "data.noise_sigma", [] { return "must be >= 0"; });
  if (data["source"] == "cifar10")
    require_field(!data["train_path"].get<std::string>().empty() && !data["test_path"].get<std::string>().empty(),
                  "data.train_path", [] { return "cifar10 source needs train_path and test_path"; });
  const json& widths = d["backbone"]["widths"];
  if (!widths.empty()) {
    const std::size_t want = d["backbone"]["arch"] == "tiny" ? 4 : 3;
    require_field(widths.size() == want, "backbone.widths",
                  [&] { return "expected " + std::to_string(want) + " widths for this arch"; });
    for (const auto& w : widths) require_field(w.get<int>() >= 1, "backbone.widths", [] { return "widths must be >= 1"; });
  }
  try {
    MoEConfig m{d["moe"]["num_experts"].get<int>(), d["moe"]["model_scale"].get<double>(), RoutingMode::hard,
                d["moe"]["blocks_per_router"].get<int>()};
    m.validate();
  } catch (const ContractError& e) {
    throw ConfigError("moe", e.what());
  }
  try {
    c.train_config().validate();
  } catch (const ContractError& e) {
    throw ConfigError("train", e.what());
  }
  try {
    c.eval_attack().validate();
  } catch (const ContractError& e) {
    throw ConfigError("attack_eval", e.what());
  }
  for (const char* k : {"eval_every", "eval_samples", "checkpoint_every"})
    require_field(d["train"][k].get<int>() >= 0, std::string("train.") + k, [] { return "must be >= 0"; });
  require_field(d["train"]["eval_batch"].get<int>() >= 1, "train.eval_batch", [] { return "must be >= 1"; });
  const json& mk = d["mask"];
  require_field(mk["mask_epochs"].get<int>() >= 0 && mk["finetune_epochs"].get<int>() >= 0, "mask",
                [] { return "epochs must be >= 0"; });
}

AttackConfig attack_from(const json& a, AttackObjective objective) {
  AttackConfig c;
  c.epsilon = a["epsilon"].get<double>();
  c.steps = a["steps"].get<int>();
  c.step_size = a["step_size"].get<double>();
  c.init = parse_attack_init(a["init"].get<std::string>());
  c.gauss_sigma = a["gauss_sigma"].get<double>();
  c.objective = objective;
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  const json def = default_experiment_document();
  check_against(def, doc, "");
  ExperimentConfig c;
  c.doc_ = def;
  merge_into(c.doc_, doc);
  check_semantics(c);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("--config", "cannot open '" + path + "'");
  json doc;
  try {
    doc = json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("not a valid JSON document: ") + e.what());
  }
  return from_json(doc);
}

ExperimentConfig ExperimentConfig::with(const std::string& dotted_key, const json& value) const {
  json patch = json::object();
  json* node = &patch;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("--override", "empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = value;
  json merged = doc_;
  // Validate the patch alone first so the error names the overridden field.
  check_against(default_experiment_document(), patch, "");
  merge_into(merged, patch);
  return from_json(merged);
}

ExperimentConfig ExperimentConfig::with_override(const std::string& assignment) const {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--override", "expected KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  return with(key, value);
}

std::string ExperimentConfig::method() const { return doc_["method"].get<std::string>(); }
std::uint64_t ExperimentConfig::seed() const { return doc_["seed"].get<std::uint64_t>(); }
std::string ExperimentConfig::output_dir() const { return doc_["output_dir"].get<std::string>(); }

std::string ExperimentConfig::run_id() const {
  const int n = method_uses_experts(method()) ? doc_["moe"]["num_experts"].get<int>() : 1;
  return method() + "_N" + std::to_string(n) + "_r" + format_number(doc_["moe"]["model_scale"].get<double>()) + "_s" +
         std::to_string(seed());
}

Variant ExperimentConfig::variant() const {
  const std::string m = method();
  if (m == "dense" || m == "sparse") return Variant::dense;
  if (m == "sdense") return Variant::sdense;
  return Variant::moe;
}

ModelConfig ExperimentConfig::model_config(const Dataset& data) const {
  ModelConfig mc;
  const json& bb = doc_["backbone"];
  std::vector<int> widths = bb["widths"].get<std::vector<int>>();
  const bool tiny = bb["arch"] == "tiny";
  if (widths.empty()) widths = tiny ? std::vector<int>{16, 32, 64, 64} : std::vector<int>{16, 32, 64};
  mc.backbone = tiny ? tiny_conv_net(data.num_classes, data.height(), data.width(), data.channels(), widths)
                     : mini_resnet8(data.num_classes, data.height(), data.width(), data.channels(), widths);
  const json& m = doc_["moe"];
  mc.moe.num_experts = m["num_experts"].get<int>();
  mc.moe.model_scale = m["model_scale"].get<double>();
  mc.moe.routing = parse_routing_mode(m["routing"].get<std::string>());
  mc.moe.blocks_per_router = m["blocks_per_router"].get<int>();
  mc.variant = variant();
  mc.seed = seed();
  return mc;
}

TrainConfig ExperimentConfig::train_config() const {
  const json& t = doc_["train"];
  TrainConfig c;
  c.epochs = t["epochs"].get<int>();
  c.batch_size = t["batch_size"].get<int>();
  c.lr0 = t["lr"].get<double>();
  c.momentum = t["momentum"].get<double>();
  c.weight_decay = t["weight_decay"].get<double>();
  c.inv_lambda = t["trades_inv_lambda"].get<double>();
  c.lower_steps = t["lower_steps"].get<int>();
  c.frozen = t["frozen"].get<std::vector<std::string>>();
  c.attack = attack_from(doc_["attack_train"], AttackObjective::kl);
  c.seed = seed();
  return c;
}

AttackConfig ExperimentConfig::eval_attack() const { return attack_from(doc_["attack_eval"], AttackObjective::ce); }

MaskLearnConfig ExperimentConfig::mask_config() const {
  const json& m = doc_["mask"];
  MaskLearnConfig c;
  c.ratio = doc_["moe"]["model_scale"].get<double>();
  c.mask_epochs = m["mask_epochs"].get<int>();
  c.finetune_epochs = m["finetune_epochs"].get<int>();
  c.score_init = m["score_init"].get<std::string>();
  c.score_lr = m["score_lr"].get<double>();
  return c;
}

int ExperimentConfig::eval_every() const { return doc_["train"]["eval_every"].get<int>(); }
int ExperimentConfig::eval_samples() const { return doc_["train"]["eval_samples"].get<int>(); }
int ExperimentConfig::eval_batch() const { return doc_["train"]["eval_batch"].get<int>(); }
int ExperimentConfig::checkpoint_every() const { return doc_["train"]["checkpoint_every"].get<int>(); }
std::string ExperimentConfig::pretrained() const { return doc_["train"]["pretrained"].get<std::string>(); }

namespace {

Dataset make_data(const json& d, std::uint64_t seed, bool train) {
  if (d["source"] == "cifar10") {
    const std::string path = d[train ? "train_path" : "test_path"].get<std::string>();
    return load_cifar10_binary(path, d[train ? "max_train" : "max_test"].get<int>(), train ? "train" : "test");
  }
  SyntheticConfig s;
  s.num_classes = d["num_classes"].get<int>();
  s.n_per_class = d[train ? "train_per_class" : "test_per_class"].get<int>();
  s.channels = d["channels"].get<int>();
  s.height = d["height"].get<int>();
  s.width = d["width"].get<int>();
  s.noise_sigma = d["noise_sigma"].get<double>();
  s.amplitude = d["amplitude"].get<double>();
  s.seed = seed;
  s.split = train ? "train" : "test";
  return gen_synthetic(s);
}

}  // namespace

Dataset ExperimentConfig::train_data() const { return make_data(doc_["data"], seed(), true); }
Dataset ExperimentConfig::test_data() const { return make_data(doc_["data"], seed(), false); }

// ---------------------------------------------------------------------------

namespace {

struct RowWriter {
  std::string run_id, method;
  int n_experts = 1;
  double r = 0.0;
  std::uint64_t seed = 0;
  double gflops = 0.0;

  std::string row(int epoch, const std::string& split, const std::string& sa, const std::string& ra,
                   const std::string& loss, const std::string& lr) const {
    return run_id + "," + method + "," + std::to_string(n_experts) + "," + format_number(r) + "," +
           std::to_string(seed) + "," + std::to_string(epoch) + "," + split + "," + sa + "," + ra + "," + loss + "," +
           lr + "," + format_number(gflops);
  }
};

json eval_json(const EvalReport& e, double gflops) {
  return {{"sa", e.sa},
          {"ra", e.ra},
          {"n", e.n},
          {"gflops", gflops},
          {"attack",
           {{"epsilon", e.attack.epsilon},
            {"steps", e.attack.steps},
            {"step_size", e.attack.alpha()},
            {"init", to_string(e.attack.init)},
            {"objective", to_string(e.attack.objective)}}}};
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + p.string() + "'");
  f << text;
}

Dataset eval_subset(const ExperimentConfig& cfg, const Dataset& test) {
  const int n = cfg.eval_samples();
  return n > 0 && n < test.size() ? test.slice(0, n) : test;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  const Dataset train = cfg.train_data();
  const Dataset test = cfg.test_data();
  const Dataset eval_set = eval_subset(cfg, test);
  const std::string method = cfg.method();
  ModelConfig mc = cfg.model_config(train);
  TrainConfig tc = cfg.train_config();
  const AttackConfig eval_attack = cfg.eval_attack();
  const MaskLearnConfig mask_cfg = cfg.mask_config();

  RowWriter rw{cfg.run_id(), method, method_uses_experts(method) ? mc.moe.num_experts : 1, mc.moe.model_scale,
               cfg.seed(), 0.0};
  if (method == "sparse") {
    ModelConfig sc = mc;
    sc.variant = Variant::sparse;
    ChannelMask m;
    std::vector<int> dense_widths;
    for (const auto& u : mc.backbone.units) dense_widths.push_back(u.out_channels);
    for (int k : mask_sizes(dense_widths, mask_cfg.ratio)) {
      std::vector<int> s(static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(i)] = i;
      m.units.push_back(std::move(s));
    }
    sc.mask = m;
    rw.gflops = flops_estimate(sc) / 1e9;
  } else {
    rw.gflops = flops_estimate(mc) / 1e9;
  }

  RunResult res;
  const Model<float>* live = nullptr;
  const fs::path out(out_dir);
  const json extra_base = {{"experiment", cfg.doc()}, {"method", method}, {"run_id", rw.run_id}};
  const int total_epochs = method == "sparse" ? mask_cfg.mask_epochs + mask_cfg.finetune_epochs : tc.epochs;
  auto on_epoch = [&](const EpochStats& s) {
    res.metrics_rows.push_back(rw.row(s.epoch, "train", "", "", format_number(s.loss), format_number(s.lr)));
    const bool last = s.epoch + 1 == total_epochs;
    if (live != nullptr && !last && cfg.eval_every() > 0 && (s.epoch + 1) % cfg.eval_every() == 0) {
      const EvalReport e = evaluate(*live, eval_set, eval_attack, cfg.seed(), cfg.eval_batch());
      res.metrics_rows.push_back(rw.row(s.epoch, "test", format_number(e.sa), format_number(e.ra), "", ""));
    }
    if (live != nullptr && !out_dir.empty() && cfg.checkpoint_every() > 0 && !last &&
        (s.epoch + 1) % cfg.checkpoint_every() == 0)
      save_checkpoint((out / ("checkpoint_e" + std::to_string(s.epoch + 1) + ".bin")).string(), *live, extra_base);
  };

  if (method == "dense" || method == "sdense" || method == "moe_at" || method == "standard") {
    res.model = Model<float>::build(mc);
    if (method == "standard") tc.inv_lambda = 0.0;
    live = &res.model;
    res.history = at_train(res.model, train, tc, on_epoch);
  } else if (method == "advmoe") {
    res.model = Model<float>::build(mc);
    live = &res.model;
    res.history = advmoe_train(res.model, train, tc, on_epoch);
  } else if (method == "router_only") {
    if (!cfg.pretrained().empty()) {
      Checkpoint ck = load_checkpoint(cfg.pretrained());
      if (ck.model.variant() != Variant::moe)
        throw ConfigError("train.pretrained", "router_only needs an MoE checkpoint");
      res.model = std::move(ck.model);
    } else {
      res.model = run_experiment(cfg.with("method", "standard"), "").model;
    }
    tc.frozen = {"backbone"};
    live = &res.model;
    res.history = at_train(res.model, train, tc, on_epoch);
  } else if (method == "sparse") {
    const Model<float> dense = Model<float>::build(mc);
    MaskResult mr = learn_robust_mask(dense, train, mask_cfg, tc, on_epoch);
    res.model = std::move(mr.model);
    res.mask = mr.mask;
    res.history = mr.finetune_history;
  } else {
    throw ConfigError("method", "unknown method '" + method + "'");
  }

  res.gflops = flops_estimate(res.model.config()) / 1e9;
  res.eval = evaluate(res.model, eval_set, eval_attack, cfg.seed(), cfg.eval_batch());
  res.metrics_rows.push_back(rw.row(std::max(0, total_epochs - 1), "test", format_number(res.eval.sa),
                                    format_number(res.eval.ra), "", ""));

  if (!out_dir.empty()) {
    std::string csv = std::string(kMetricsHeader) + "\n";
    for (const auto& r : res.metrics_rows) csv += r + "\n";
    write_text(out / "metrics.csv", csv);
    write_text(out / "config.json", cfg.doc().dump(2) + "\n");
    json extra = extra_base;
    extra["eval"] = eval_json(res.eval, res.gflops);
    save_checkpoint((out / "checkpoint.bin").string(), res.model, extra);
  }
  return res;
}

RunResult cmd_train(const ExperimentConfig& cfg) { return run_experiment(cfg, cfg.output_dir()); }

ExperimentConfig checkpoint_experiment(const json& extra) {
  if (!extra.contains("experiment")) throw FormatError("checkpoint carries no experiment document");
  return ExperimentConfig::from_json(extra.at("experiment"));
}

namespace {

struct Loaded {
  Checkpoint ck;
  ExperimentConfig cfg;
  fs::path out;
};

Loaded load_for_analysis(const std::string& checkpoint, const std::vector<std::string>& overrides,
                         const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  ExperimentConfig cfg = checkpoint_experiment(ck.extra);
  for (const auto& o : overrides) cfg = cfg.with_override(o);
  fs::path out = out_dir.empty() ? fs::path(checkpoint).parent_path() : fs::path(out_dir);
  return Loaded{std::move(ck), std::move(cfg), std::move(out)};
}

}  // namespace

json cmd_eval(const std::string& checkpoint, const std::vector<std::string>& overrides, const std::string& out_dir) {
  Loaded l = load_for_analysis(checkpoint, overrides, out_dir);
  const Dataset test = eval_subset(l.cfg, l.cfg.test_data());
  const EvalReport e = evaluate(l.ck.model, test, l.cfg.eval_attack(), l.cfg.seed(), l.cfg.eval_batch());
  json doc = eval_json(e, flops_estimate(l.ck.model.config()) / 1e9);
  doc["method"] = l.cfg.method();
  doc["variant"] = to_string(l.ck.model.variant());
  write_text(l.out / "eval.json", doc.dump(2) + "\n");
  return doc;
}

json cmd_dissect(const std::string& checkpoint, const std::vector<std::string>& overrides, const std::string& out_dir) {
  Loaded l = load_for_analysis(checkpoint, overrides, out_dir);
  if (l.ck.model.variant() != Variant::moe)
    throw ConfigError("--checkpoint", "dissection needs an MoE checkpoint, got " + to_string(l.ck.model.variant()));
  const Dataset test = eval_subset(l.cfg, l.cfg.test_data());
  const AttackPass pass = attack_pass(l.ck.model, test, l.cfg.eval_attack(), l.cfg.seed(), l.cfg.eval_batch());
  const DissectionReport d = dissect_report(pass);
  const EvalReport e = eval_report(pass);
  std::ostringstream csv;
  csv << "n,f1,f2,f3,f4,router_robustness,prediction_robustness,sa,ra\n"
      << d.n << ',' << format_number(d.f1) << ',' << format_number(d.f2) << ',' << format_number(d.f3) << ','
      << format_number(d.f4) << ',' << format_number(d.router_robustness()) << ','
      << format_number(d.prediction_robustness()) << ',' << format_number(e.sa) << ',' << format_number(e.ra) << '\n';
  write_text(l.out / "dissect.csv", csv.str());
  return {{"n", d.n}, {"f1", d.f1}, {"f2", d.f2}, {"f3", d.f3}, {"f4", d.f4},
          {"router_robustness", d.router_robustness()}, {"prediction_robustness", d.prediction_robustness()},
          {"sa", e.sa}, {"ra", e.ra}};
}

json cmd_iou(const std::string& checkpoint, const std::string& mask_checkpoint, const std::vector<std::string>& overrides,
             const std::string& out_dir) {
  Loaded l = load_for_analysis(checkpoint, overrides, out_dir);
  if (l.ck.model.variant() != Variant::moe)
    throw ConfigError("--checkpoint", "pathway IoU needs an MoE checkpoint, got " + to_string(l.ck.model.variant()));
  ChannelMask mask;
  if (mask_checkpoint.empty()) {
    mask = expert_mask(l.ck.model.partition(), 0);
  } else {
    Checkpoint mk = load_checkpoint(mask_checkpoint);
    if (mk.model.variant() != Variant::sparse || !mk.model.config().mask)
      throw ConfigError("--mask", "mask checkpoint must hold a sparse model");
    mask = *mk.model.config().mask;
  }
  const Dataset test = eval_subset(l.cfg, l.cfg.test_data());
  const AttackConfig atk = l.cfg.eval_attack();
  std::optional<AttackConfig> attack;
  if (atk.epsilon > 0.0) attack = atk;
  std::vector<IoUResult> res;
  try {
    res = pathway_iou(l.ck.model, mask, test, attack, l.cfg.seed(), l.cfg.eval_batch());
  } catch (const ContractError& e) {
    throw ConfigError("--mask", e.what());
  }
  std::ostringstream per, hist;
  per << "index,split,iou\n";
  hist << "split,bin_lo,bin_hi,count\n";
  json summary = json::object();
  for (const std::string split : {"clean", "adversarial"}) {
    std::vector<double> v;
    for (const auto& r : res)
      if (r.split == split) v.push_back(r.iou);
    if (v.empty()) continue;
    for (const auto& r : res)
      if (r.split == split) per << r.index << ',' << r.split << ',' << format_number(r.iou) << '\n';
    const Histogram h = histogram(v);
    write_histogram_csv(hist, h, split);
    double mean = 0.0;
    for (double x : v) mean += x;
    summary[split] = {{"n", v.size()}, {"mean_iou", mean / static_cast<double>(v.size())}, {"histogram", h.counts}};
  }
  write_text(l.out / "iou.csv", per.str());
  write_text(l.out / "iou_hist.csv", hist.str());
  return summary;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg) {
  const json& s = cfg.doc()["sweep"];
  const auto grid = sweep_grid(s["methods"].get<std::vector<std::string>>(), s["num_experts"].get<std::vector<int>>(),
                               s["model_scales"].get<std::vector<double>>(),
                               s["seeds"].get<std::vector<std::uint64_t>>());
  const fs::path out(cfg.output_dir());
  auto rows = run_sweep(grid, [&](const SweepCell& c) {
    ExperimentConfig cell = cfg.with("method", c.method)
                                .with("moe.num_experts", method_uses_experts(c.method) ? c.num_experts
                                                                                       : cfg.doc()["moe"]["num_experts"].get<int>())
                                .with("moe.model_scale", c.model_scale)
                                .with("seed", c.seed);
    cell = cell.with("output_dir", (out / cell.run_id()).string());
    const RunResult r = run_experiment(cell, cell.output_dir());
    return SweepRow{c, r.eval.sa, r.eval.ra, r.gflops};
  });
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  write_text(out / "sweep.csv", csv.str());
  return rows;
}

}  // namespace moelab
