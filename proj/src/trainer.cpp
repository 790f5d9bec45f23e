// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "hfp/error.hpp"
#include "hfp/optimizer.hpp"

namespace hfp {

namespace {

std::string csv_num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

float lr_for_epoch(const TrainConfig& cfg, int epoch, int epochs) {
  if (epochs <= 1) return cfg.lr_start;
  const float t = static_cast<float>(epoch) / static_cast<float>(epochs - 1);
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * t;
}

struct SparsityContext {
  PruningTargets targets;
  BaseComplexity base;
  double lambda = 0.0;
};

struct EpochAccum {
  double learn = 0.0;
  double prune = 0.0;
  double total = 0.0;
  int steps = 0;
};

/// One pass over the training split. With a sparsity context the gamma
/// parameters additionally receive lambda-weighted pruning gradients; the
/// masks used by loss and gradient are snapshotted once per batch.
EpochAccum run_epoch(Model& model, const Dataset& train, float lr, const TrainConfig& cfg,
                     std::mt19937& shuffle_rng, const SparsityContext* sp) {
  const int n = train.size();
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  EpochAccum acc;
  Tensor batch;
  std::vector<int> labels;
  std::vector<Param*> params = model.parameters();
  for (int first = 0; first + 1 < n; first += cfg.batch_size) {
    const int count = std::min(cfg.batch_size, n - first);  // >= 2: batch norm needs it
    gather_batch(train, order, static_cast<size_t>(first), static_cast<size_t>(count), batch,
                 labels);
    Tape tape;
    const Value logits = forward(model, tape, batch, BnMode::Train);
    const Value loss = softmax_cross_entropy(logits, labels);
    const double learning_loss = tape.value(loss)[0];
    require(std::isfinite(learning_loss), "training diverged: non-finite loss at step ", acc.steps);

    double lp = 0.0;
    GammaMap prune_grads;
    if (sp) {
      const MaskSet masks = masks_from_gammas(model.graph, model.gammas(), sp->targets.threshold);
      const ComplexitySnapshot snap = effective_complexity(model.graph, masks);
      lp = pruning_loss(snap, sp->targets, sp->base);
      if (sp->lambda > 0.0 && lp > 0.0) {
        prune_grads =
            pruning_loss_grad_gamma(model.graph, model.gammas(), masks, sp->targets, sp->base);
      }
    }

    tape.backward(loss);
    for (const auto& [id, grad] : prune_grads) {
      Param& gamma = model.norms.at(id).gamma;
      for (size_t c = 0; c < grad.size(); ++c) {
        gamma.grad[c] += static_cast<float>(sp->lambda * grad[c]);
      }
    }
    sgd_nesterov_step(params, lr, cfg.momentum);

    acc.learn += learning_loss;
    acc.prune += lp;
    acc.total += learning_loss + (sp ? sp->lambda * lp : 0.0);
    ++acc.steps;
  }
  require(acc.steps > 0, "training: dataset too small for batch size ", cfg.batch_size);
  return acc;
}

EpochLog make_epoch_log(Model& model, const DataBundle& data, const TrainConfig& cfg,
                        const EpochAccum& acc, int epoch, const std::string& phase, double lr,
                        double lambda) {
  EpochLog log;
  log.epoch = epoch;
  log.phase = phase;
  log.lr = lr;
  log.lambda = lambda;
  log.mean_learning_loss = acc.learn / acc.steps;
  log.mean_pruning_loss = acc.prune / acc.steps;
  log.mean_total_loss = acc.total / acc.steps;

  const BaseComplexity base = base_complexity(model.graph);
  const MaskSet masks = current_masks(model, cfg.threshold);
  const ComplexitySnapshot snap = effective_complexity(model.graph, masks, epoch);
  log.effective_params = snap.effective_params;
  log.effective_mults = snap.effective_mults;
  if (base.total_params > 0) {
    log.params_rate =
        1.0 - static_cast<double>(snap.effective_params) / static_cast<double>(base.total_params);
  }
  if (base.total_mults > 0) {
    log.mults_rate =
        1.0 - static_cast<double>(snap.effective_mults) / static_cast<double>(base.total_mults);
  }
  log.layers = layer_report(snap, base);
  log.train_accuracy = evaluate(model, data.train, cfg.batch_size).accuracy;
  log.test_accuracy = evaluate(model, data.test, cfg.batch_size).accuracy;
  return log;
}

}  // namespace

ProportionalRates proportional_rates(const ComplexitySnapshot& snap, const BaseComplexity& base) {
  ProportionalRates out;
  int64_t pruned_params = 0, pruned_mults = 0;
  for (size_t i = 0; i < snap.per_layer.size(); ++i) {
    pruned_params += base.per_layer_params[i] - snap.per_layer[i].effective_params;
    pruned_mults += base.per_layer_mults[i] - snap.per_layer[i].effective_mults;
  }
  if (pruned_params > 0) {
    out.params.resize(snap.per_layer.size());
    for (size_t i = 0; i < snap.per_layer.size(); ++i) {
      out.params[i] =
          static_cast<double>(base.per_layer_params[i] - snap.per_layer[i].effective_params) /
          static_cast<double>(pruned_params);
    }
  }
  if (pruned_mults > 0) {
    out.mults.resize(snap.per_layer.size());
    for (size_t i = 0; i < snap.per_layer.size(); ++i) {
      out.mults[i] =
          static_cast<double>(base.per_layer_mults[i] - snap.per_layer[i].effective_mults) /
          static_cast<double>(pruned_mults);
    }
  }
  return out;
}

std::vector<LayerReportRow> layer_report(const ComplexitySnapshot& snap,
                                         const BaseComplexity& base) {
  const ProportionalRates prop = proportional_rates(snap, base);
  std::vector<LayerReportRow> rows;
  for (size_t i = 0; i < snap.per_layer.size(); ++i) {
    const LayerComplexityRate& r = snap.per_layer[i];
    LayerReportRow row;
    row.layer_id = r.layer_id;
    row.kind = r.kind;
    row.base_params = r.base_params;
    row.base_mults = r.base_mults;
    row.effective_params = r.effective_params;
    row.effective_mults = r.effective_mults;
    row.params_rate = r.params_rate;
    row.mults_rate = r.mults_rate;
    row.prop_params = prop.params.empty() ? 0.0 : prop.params[i];
    row.prop_mults = prop.mults.empty() ? 0.0 : prop.mults[i];
    rows.push_back(row);
  }
  return rows;
}

PruningTargets resolve_targets(const NetworkGraph& graph, const TrainConfig& cfg) {
  NetworkGraph g = graph;
  validate_or_throw(g);
  const BaseComplexity base = base_complexity(g);
  require(cfg.target_params_rate >= 0.0 && cfg.target_params_rate <= 1.0,
          "target params rate must be in [0,1], got ", cfg.target_params_rate);
  require(cfg.target_mults_rate >= 0.0 && cfg.target_mults_rate <= 1.0,
          "target mults rate must be in [0,1], got ", cfg.target_mults_rate);
  PruningTargets t;
  t.threshold = cfg.threshold;
  t.target_params = cfg.target_params_abs
                        ? *cfg.target_params_abs
                        : static_cast<int64_t>(std::llround(
                              static_cast<double>(base.total_params) * (1.0 - cfg.target_params_rate)));
  t.target_mults = cfg.target_mults_abs
                       ? *cfg.target_mults_abs
                       : static_cast<int64_t>(std::llround(
                             static_cast<double>(base.total_mults) * (1.0 - cfg.target_mults_rate)));
  require(t.target_params >= 0 && t.target_params <= base.total_params,
          "target params ", t.target_params, " outside [0,", base.total_params, "]");
  require(t.target_mults >= 0 && t.target_mults <= base.total_mults, "target mults ",
          t.target_mults, " outside [0,", base.total_mults, "]");
  require(t.threshold > 0, "threshold must be positive");
  return t;
}

std::vector<EpochLog> train_baseline(Model& model, const DataBundle& data, const TrainConfig& cfg) {
  require(cfg.epochs >= 1, "train_baseline: epochs must be >= 1");
  require(cfg.batch_size >= 2, "train_baseline: batch size must be >= 2");
  require(cfg.lr_end > 0 && cfg.lr_end <= cfg.lr_start, "train_baseline: need 0 < lr_end <= lr_start");
  std::mt19937 shuffle_rng(static_cast<uint32_t>(cfg.seed));
  std::vector<EpochLog> logs;
  for (int e = 0; e < cfg.epochs; ++e) {
    const float lr = lr_for_epoch(cfg, e, cfg.epochs);
    const EpochAccum acc = run_epoch(model, data.train, lr, cfg, shuffle_rng, nullptr);
    logs.push_back(make_epoch_log(model, data, cfg, acc, e, "baseline", lr, 0.0));
  }
  return logs;
}

LambdaMeasurement measure_lambda_target(Model& model, const Dataset& data,
                                        const PruningTargets& targets, int batch_size) {
  LambdaMeasurement m;
  m.mean_learning_loss = evaluate(model, data, batch_size).mean_loss;
  const MaskSet masks = current_masks(model, targets.threshold);
  const ComplexitySnapshot snap = effective_complexity(model.graph, masks);
  const BaseComplexity base = base_complexity(model.graph);
  m.initial_pruning_loss = pruning_loss(snap, targets, base);
  if (m.initial_pruning_loss <= 0.0) {
    m.lambda = 1.0;
    m.degenerate = true;
  } else {
    m.lambda = m.mean_learning_loss / m.initial_pruning_loss;
  }
  return m;
}

std::vector<EpochLog> sparsity_learn(Model& model, const DataBundle& data, const TrainConfig& cfg,
                                     const PruningTargets& targets,
                                     const LambdaSchedule& schedule) {
  require(cfg.epochs >= 1, "sparsity_learn: epochs must be >= 1");
  require(cfg.batch_size >= 2, "sparsity_learn: batch size must be >= 2");
  std::mt19937 shuffle_rng(static_cast<uint32_t>(cfg.seed));
  SparsityContext sp;
  sp.targets = targets;
  sp.base = base_complexity(model.graph);
  std::vector<EpochLog> logs;
  for (int e = 0; e < cfg.epochs; ++e) {
    const float lr = lr_for_epoch(cfg, e, cfg.epochs);
    sp.lambda = lambda_at(schedule, e);
    const EpochAccum acc = run_epoch(model, data.train, lr, cfg, shuffle_rng, &sp);
    logs.push_back(make_epoch_log(model, data, cfg, acc, e, "sparsity", lr, sp.lambda));
  }
  return logs;
}

std::vector<EpochLog> fine_tune(Model& model, const DataBundle& data, const TrainConfig& cfg) {
  std::vector<EpochLog> logs;
  if (cfg.fine_tune_epochs <= 0) return logs;
  std::mt19937 shuffle_rng(static_cast<uint32_t>(cfg.seed) + 0x9e3779b9u);
  TrainConfig ft = cfg;
  ft.lr_start = ft.lr_end = cfg.lr_end;
  for (int e = 0; e < cfg.fine_tune_epochs; ++e) {
    EpochAccum acc;
    if (cfg.fine_tune_bn_only) {
      // Forward passes in train mode refresh the running statistics; the
      // weights stay untouched.
      const int n = data.train.size();
      std::vector<int> order(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      Tensor batch;
      std::vector<int> labels;
      for (int first = 0; first < n; first += cfg.batch_size) {
        const int count = std::min(cfg.batch_size, n - first);
        if (count < 2) break;
        gather_batch(data.train, order, static_cast<size_t>(first), static_cast<size_t>(count),
                     batch, labels);
        Tape tape;
        const Value logits = forward(model, tape, batch, BnMode::Train);
        const Value loss = softmax_cross_entropy(logits, labels);
        acc.learn += tape.value(loss)[0];
        acc.total += tape.value(loss)[0];
        ++acc.steps;
      }
    } else {
      acc = run_epoch(model, data.train, ft.lr_end, ft, shuffle_rng, nullptr);
    }
    logs.push_back(make_epoch_log(model, data, cfg, acc, e, "finetune", ft.lr_end, 0.0));
  }
  return logs;
}

HfpRunResult run_hfp(const NetworkGraph& graph, const DataBundle& data, const TrainConfig& cfg,
                     const Model* pretrained) {
  HfpRunResult r;
  NetworkGraph g = graph;
  validate_or_throw(g);
  r.base = base_complexity(g);
  r.targets = resolve_targets(g, cfg);

  std::vector<EpochLog> logs;
  Model model = pretrained ? *pretrained : init_model(g, cfg.seed);
  if (!pretrained && cfg.baseline_epochs > 0) {
    TrainConfig bc = cfg;
    bc.epochs = cfg.baseline_epochs;
    auto bl = train_baseline(model, data, bc);
    logs.insert(logs.end(), bl.begin(), bl.end());
  }
  r.baseline = model;
  r.baseline_eval = evaluate(model, data.test, cfg.batch_size);

  LambdaSchedule schedule = cfg.lambda;
  schedule.total_epochs = cfg.epochs;
  if (cfg.lambda_auto) {
    const LambdaMeasurement m =
        measure_lambda_target(model, data.train, r.targets, cfg.batch_size);
    schedule.target_value = m.lambda;
    r.lambda_degenerate = m.degenerate;
    if (schedule.mode == LambdaSchedule::Mode::LinearHeatup &&
        schedule.target_value < schedule.start_value) {
      schedule.target_value = schedule.start_value;
      r.lambda_clamped = true;
    }
  }
  r.lambda_target = schedule.target_value;

  auto sl = sparsity_learn(model, data, cfg, r.targets, schedule);
  logs.insert(logs.end(), sl.begin(), sl.end());
  {
    // end-state pruning loss: the masks structural pruning will act on
    const MaskSet masks = current_masks(model, cfg.threshold);
    r.final_pruning_loss = pruning_loss(effective_complexity(model.graph, masks), r.targets, r.base);
  }

  zero_inactive(model, cfg.threshold);
  r.plan = make_plan(model, cfg.threshold);
  Model pruned = structural_prune(model, r.plan);
  r.post_prune_eval = evaluate(pruned, data.test, cfg.batch_size);

  auto ft = fine_tune(pruned, data, cfg);
  logs.insert(logs.end(), ft.begin(), ft.end());

  const BaseComplexity pruned_base = base_complexity(pruned.graph);
  r.achieved_params_rate =
      1.0 - static_cast<double>(pruned_base.total_params) / static_cast<double>(r.base.total_params);
  r.achieved_mults_rate =
      1.0 - static_cast<double>(pruned_base.total_mults) / static_cast<double>(r.base.total_mults);
  r.final_eval = evaluate(pruned, data.test, cfg.batch_size);
  r.model = std::move(pruned);
  r.logs = std::move(logs);
  return r;
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

namespace {

std::ofstream open_csv(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write ", path);
  return out;
}

}  // namespace

void write_epoch_log_csv(const std::string& path, const std::vector<EpochLog>& logs) {
  std::ofstream out = open_csv(path);
  out << "phase,epoch,lr,lambda,mean_learning_loss,mean_pruning_loss,mean_total_loss,"
         "effective_params,effective_mults,params_rate,mults_rate,train_accuracy,test_accuracy\n";
  for (const auto& l : logs) {
    out << l.phase << ',' << l.epoch << ',' << csv_num(l.lr) << ',' << csv_num(l.lambda) << ','
        << csv_num(l.mean_learning_loss) << ',' << csv_num(l.mean_pruning_loss) << ','
        << csv_num(l.mean_total_loss) << ',' << l.effective_params << ',' << l.effective_mults
        << ',' << csv_num(l.params_rate) << ',' << csv_num(l.mults_rate) << ','
        << csv_num(l.train_accuracy) << ',' << csv_num(l.test_accuracy) << '\n';
  }
}

void write_layer_rates_csv(const std::string& path, const std::vector<EpochLog>& logs) {
  std::ofstream out = open_csv(path);
  out << "phase,epoch,layer_id,kind,params,mults,params_rate,mults_rate,prop_params,prop_mults\n";
  for (const auto& l : logs) {
    for (const auto& row : l.layers) {
      if (row.base_params == 0 && row.base_mults == 0) continue;
      out << l.phase << ',' << l.epoch << ',' << row.layer_id << ',' << to_string(row.kind) << ','
          << row.base_params << ',' << row.base_mults << ',' << csv_num(row.params_rate) << ','
          << csv_num(row.mults_rate) << ',' << csv_num(row.prop_params) << ','
          << csv_num(row.prop_mults) << '\n';
    }
  }
}

void write_layer_report_csv(const std::string& path, const std::vector<LayerReportRow>& rows) {
  std::ofstream out = open_csv(path);
  out << "layer_id,kind,params,mults,effective_params,effective_mults,params_rate,mults_rate,"
         "prop_params,prop_mults\n";
  for (const auto& row : rows) {
    if (row.base_params == 0 && row.base_mults == 0) continue;
    out << row.layer_id << ',' << to_string(row.kind) << ',' << row.base_params << ','
        << row.base_mults << ',' << row.effective_params << ',' << row.effective_mults << ','
        << csv_num(row.params_rate) << ',' << csv_num(row.mults_rate) << ','
        << csv_num(row.prop_params) << ',' << csv_num(row.prop_mults) << '\n';
  }
}

}  // namespace hfp
