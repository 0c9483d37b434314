// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// moelab train|eval|dissect|iou|sweep
//
// Exit codes: 0 success, 2 config/format error, 3 numerical failure,
// 1 anything else.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/errors.hpp"
#include "moelab/experiment.hpp"

namespace {

struct Common {
  std::string config;
  std::string checkpoint;
  std::string mask;
  std::string out;
  long long seed = -1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool needs_checkpoint) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
  cmd->add_option("--override", c.overrides, "KEY=VALUE, dotted key; repeatable")->take_all()->allow_extra_args(false);
  cmd->add_option("--out", c.out, "output directory");
  if (needs_checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "checkpoint file")->required();
}

std::vector<std::string> all_overrides(const Common& c) {
  std::vector<std::string> o = c.overrides;
  if (c.seed >= 0) o.push_back("seed=" + std::to_string(c.seed));
  return o;
}

moelab::ExperimentConfig resolve(const Common& c) {
  moelab::ExperimentConfig cfg = c.config.empty() ? moelab::ExperimentConfig::from_json(nlohmann::json::object())
                                                  : moelab::ExperimentConfig::load(c.config);
  for (const auto& o : all_overrides(c)) cfg = cfg.with_override(o);
  if (!c.out.empty()) cfg = cfg.with("output_dir", c.out);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts CNN adversarial training lab"};
  app.require_subcommand(1);
  Common train, eval, dissect, iou, sweep;
  auto* c_train = app.add_subcommand("train", "train the configured method and write checkpoint + metrics");
  add_common(c_train, train, false);
  auto* c_eval = app.add_subcommand("eval", "evaluate SA/RA of a checkpoint");
  add_common(c_eval, eval, true);
  auto* c_dissect = app.add_subcommand("dissect", "four-category robustness dissection of an MoE checkpoint");
  add_common(c_dissect, dissect, true);
  auto* c_iou = app.add_subcommand("iou", "pathway-vs-mask IoU of an MoE checkpoint");
  add_common(c_iou, iou, true);
  c_iou->add_option("--mask", iou.mask, "sparse checkpoint supplying the mask (default: expert-0 mask)");
  auto* c_sweep = app.add_subcommand("sweep", "train/evaluate every cell of the sweep grid");
  add_common(c_sweep, sweep, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_train) {
      const moelab::RunResult r = moelab::cmd_train(resolve(train));
      std::cout << nlohmann::json{{"sa", r.eval.sa}, {"ra", r.eval.ra}, {"gflops", r.gflops}}.dump() << "\n";
    } else if (*c_eval) {
      std::cout << moelab::cmd_eval(eval.checkpoint, all_overrides(eval), eval.out).dump(2) << "\n";
    } else if (*c_dissect) {
      std::cout << moelab::cmd_dissect(dissect.checkpoint, all_overrides(dissect), dissect.out).dump(2) << "\n";
    } else if (*c_iou) {
      std::cout << moelab::cmd_iou(iou.checkpoint, iou.mask, all_overrides(iou), iou.out).dump(2) << "\n";
    } else if (*c_sweep) {
      const auto rows = moelab::cmd_sweep(resolve(sweep));
      moelab::write_sweep_csv(std::cout, rows);
    }
  } catch (const moelab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const moelab::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const moelab::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
