// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Training pipeline: baseline training, sparsity learning with the combined
// objective (learning loss + lambda * pruning loss), structural pruning,
// fine-tuning and report generation.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hfp/data.hpp"
#include "hfp/model.hpp"
#include "hfp/pruning.hpp"
#include "hfp/transform.hpp"

namespace hfp {

struct TrainConfig {
  int epochs = 20;           // epochs for the phase being run
  int baseline_epochs = 10;  // used by run_hfp when no pretrained model is given
  int batch_size = 32;
  float lr_start = 0.02f;
  float lr_end = 1e-4f;
  float momentum = 0.9f;
  uint64_t seed = 1;
  // Desired pruning rates in [0,1]; absolute targets override when set.
  double target_params_rate = 0.5;
  double target_mults_rate = 0.5;
  std::optional<int64_t> target_params_abs;
  std::optional<int64_t> target_mults_abs;
  double threshold = kDefaultThreshold;
  LambdaSchedule lambda;
  bool lambda_auto = true;  // measure the target from the initial losses
  int fine_tune_epochs = 3;
  bool fine_tune_bn_only = false;  // only refresh batch statistics
};

struct LayerReportRow {
  int layer_id = -1;
  LayerKind kind = LayerKind::Conv;
  int64_t base_params = 0;
  int64_t base_mults = 0;
  int64_t effective_params = 0;
  int64_t effective_mults = 0;
  double params_rate = 0.0;  // pruned fraction of this layer
  double mults_rate = 0.0;
  double prop_params = 0.0;  // share of the total reduction
  double prop_mults = 0.0;
};

struct EpochLog {
  int epoch = 0;
  std::string phase;  // baseline | sparsity | finetune
  double lr = 0.0;
  double lambda = 0.0;
  double mean_learning_loss = 0.0;
  double mean_pruning_loss = 0.0;
  double mean_total_loss = 0.0;
  int64_t effective_params = 0;
  int64_t effective_mults = 0;
  double params_rate = 0.0;  // achieved pruning rates at epoch end
  double mults_rate = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<LayerReportRow> layers;
};

struct ProportionalRates {
  std::vector<double> params;  // per layer, aligned with graph.layers; empty when nothing pruned
  std::vector<double> mults;
};

/// Per-layer share of the total reduction; each non-empty array sums to 1.
ProportionalRates proportional_rates(const ComplexitySnapshot& snapshot,
                                     const BaseComplexity& base);

/// Resolves rate targets against the graph's base complexity.
PruningTargets resolve_targets(const NetworkGraph& graph, const TrainConfig& cfg);

/// Plain supervised training for cfg.epochs with the linear lr schedule.
std::vector<EpochLog> train_baseline(Model& model, const DataBundle& data, const TrainConfig& cfg);

struct LambdaMeasurement {
  double lambda = 1.0;
  double mean_learning_loss = 0.0;
  double initial_pruning_loss = 0.0;
  bool degenerate = false;  // targets already met; lambda defaults to 1
};

/// lambda such that lambda * L_pruning equals the current mean learning loss
/// over one pass of the data.
LambdaMeasurement measure_lambda_target(Model& model, const Dataset& data,
                                        const PruningTargets& targets, int batch_size);

/// Sparsity learning: per batch, learning gradients plus lambda times the
/// pruning-loss gamma gradient, under the per-epoch lambda schedule.
std::vector<EpochLog> sparsity_learn(Model& model, const DataBundle& data, const TrainConfig& cfg,
                                     const PruningTargets& targets,
                                     const LambdaSchedule& schedule);

/// Post-pruning retraining at lr_end. With cfg.fine_tune_bn_only only the
/// batch statistics are refreshed.
std::vector<EpochLog> fine_tune(Model& model, const DataBundle& data, const TrainConfig& cfg);

struct HfpRunResult {
  Model model;     // pruned and fine-tuned
  Model baseline;  // model entering sparsity learning
  std::vector<EpochLog> logs;
  PrunePlan plan;
  PruningTargets targets;
  BaseComplexity base;
  double lambda_target = 1.0;
  bool lambda_clamped = false;     // measured target was below the heat-up start
  bool lambda_degenerate = false;  // targets already met when measured
  double final_pruning_loss = 0.0;
  double achieved_params_rate = 0.0;
  double achieved_mults_rate = 0.0;
  EvalResult baseline_eval;
  EvalResult post_prune_eval;  // right after structural pruning
  EvalResult final_eval;
};

/// The full pipeline: (train or take) baseline -> sparsity learning ->
/// zero inactive channels -> plan -> structural prune -> fine-tune.
HfpRunResult run_hfp(const NetworkGraph& graph, const DataBundle& data, const TrainConfig& cfg,
                     const Model* pretrained = nullptr);

// CSV emitters. Numbers use shortest round-trip formatting.
void write_epoch_log_csv(const std::string& path, const std::vector<EpochLog>& logs);
void write_layer_rates_csv(const std::string& path, const std::vector<EpochLog>& logs);
void write_layer_report_csv(const std::string& path, const std::vector<LayerReportRow>& rows);

/// Per-layer report rows for a snapshot (rates plus proportional shares).
std::vector<LayerReportRow> layer_report(const ComplexitySnapshot& snapshot,
                                         const BaseComplexity& base);

}  // namespace hfp
