// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: config schema, method dispatch, checkpoints, metrics.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/analysis.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"
#include "moelab/training.hpp"

namespace moelab {

inline constexpr const char* kMetricsHeader = "run_id,method,N,r,seed,epoch,split,sa,ra,loss,lr,gflops";

/// The full default document. Every accepted key appears here.
nlohmann::json default_experiment_document();

/// A schema-validated experiment document with defaults filled in.
class ExperimentConfig {
 public:
  /// Validates `doc` against the schema (unknown keys and wrong types throw
  /// ConfigError naming the field path) and fills defaults.
  static ExperimentConfig from_json(const nlohmann::json& doc);
  static ExperimentConfig load(const std::string& path);

  const nlohmann::json& doc() const noexcept { return doc_; }

  /// KEY=VALUE with a dotted key; VALUE is parsed as JSON when possible,
  /// otherwise taken as a string. Revalidates.
  ExperimentConfig with_override(const std::string& assignment) const;
  ExperimentConfig with(const std::string& dotted_key, const nlohmann::json& value) const;

  std::string method() const;
  std::uint64_t seed() const;
  std::string output_dir() const;
  std::string run_id() const;

  Variant variant() const;
  ModelConfig model_config(const Dataset& data) const;
  TrainConfig train_config() const;
  AttackConfig eval_attack() const;
  MaskLearnConfig mask_config() const;
  int eval_every() const;
  int eval_samples() const;
  int eval_batch() const;
  int checkpoint_every() const;
  std::string pretrained() const;

  Dataset train_data() const;
  Dataset test_data() const;

 private:
  nlohmann::json doc_;
};

struct RunResult {
  Model<float> model;
  EvalReport eval;
  double gflops = 0.0;
  std::vector<std::string> metrics_rows;  // CSV lines without header
  std::optional<ChannelMask> mask;
  TrainHistory history;  // the finetune phase for "sparse"
};

/// Trains the configured method and evaluates it on the test split. When
/// `out_dir` is non-empty, writes metrics.csv, checkpoint.bin (plus periodic
/// checkpoints) and config.json there.
RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

// Subcommands. Each returns the document it wrote or printed.
RunResult cmd_train(const ExperimentConfig& cfg);
nlohmann::json cmd_eval(const std::string& checkpoint, const std::vector<std::string>& overrides,
                        const std::string& out_dir);
nlohmann::json cmd_dissect(const std::string& checkpoint, const std::vector<std::string>& overrides,
                           const std::string& out_dir);
nlohmann::json cmd_iou(const std::string& checkpoint, const std::string& mask_checkpoint,
                       const std::vector<std::string>& overrides, const std::string& out_dir);
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg);

/// Experiment document stored in a checkpoint.
ExperimentConfig checkpoint_experiment(const nlohmann::json& extra);

}  // namespace moelab
