// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: dataset loading, training stages, pruning runs,
// evaluation and inference export.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hfp/checkpoint.hpp"
#include "hfp/data.hpp"
#include "hfp/error.hpp"
#include "hfp/graph.hpp"
#include "hfp/model.hpp"
#include "hfp/trainer.hpp"
#include "hfp/transform.hpp"

namespace {

using namespace hfp;

struct CommonOpts {
  std::string arch = "tinyvgg";
  std::string data = "synth";
  int epochs = 20;
  int baseline_epochs = 10;
  int batch_size = 32;
  float lr_start = 0.02f;
  float lr_end = 1e-4f;
  double target_params_rate = 0.5;
  double target_mults_rate = 0.5;
  std::string lambda_mode = "heatup";
  std::string lambda_target = "auto";
  double threshold = kDefaultThreshold;
  int fine_tune_epochs = 3;
  uint64_t seed = 1;
  std::string out = "run";
  std::string init_checkpoint;
  int synth_train = 2048;
  int synth_test = 512;
  int synth_hw = 16;
  float synth_amplitude = 3.0f;
  float synth_noise = 1.0f;
  int limit_train = 0;
  int limit_test = 0;
};

DataBundle load_data(const CommonOpts& o) {
  if (o.data == "synth") {
    SynthSpec spec;
    spec.height = spec.width = o.synth_hw;
    spec.amplitude = o.synth_amplitude;
    spec.noise = o.synth_noise;
    return load_synth(10, o.synth_train, o.synth_test, o.seed, spec);
  }
  if (o.data.rfind("cifar10:", 0) == 0) {
    return load_cifar10_binary(o.data.substr(8), o.limit_train, o.limit_test);
  }
  fail("unknown --data '", o.data, "' (expected synth or cifar10:<dir>)");
}

TrainConfig make_config(const CommonOpts& o, int input_c, int input_hw) {
  (void)input_c;
  (void)input_hw;
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.baseline_epochs = o.baseline_epochs;
  cfg.batch_size = o.batch_size;
  cfg.lr_start = o.lr_start;
  cfg.lr_end = o.lr_end;
  cfg.seed = o.seed;
  cfg.target_params_rate = o.target_params_rate;
  cfg.target_mults_rate = o.target_mults_rate;
  cfg.threshold = o.threshold;
  cfg.fine_tune_epochs = o.fine_tune_epochs;
  cfg.lambda.mode = o.lambda_mode == "constant" ? LambdaSchedule::Mode::Constant
                                                : LambdaSchedule::Mode::LinearHeatup;
  cfg.lambda.start_value = 1.0;
  if (o.lambda_target == "auto") {
    cfg.lambda_auto = true;
  } else {
    cfg.lambda_auto = false;
    cfg.lambda.target_value = std::stod(o.lambda_target);
  }
  return cfg;
}

void add_common_flags(CLI::App* cmd, CommonOpts& o, bool with_prune_flags) {
  cmd->add_option("--arch", o.arch, "architecture: tinyvgg | tinyresnet");
  cmd->add_option("--data", o.data, "dataset: synth | cifar10:<dir>");
  cmd->add_option("--epochs", o.epochs, "training epochs for the main phase");
  cmd->add_option("--batch-size", o.batch_size, "mini-batch size");
  cmd->add_option("--lr-start", o.lr_start, "initial learning rate");
  cmd->add_option("--lr-end", o.lr_end, "final learning rate (linear decay)");
  cmd->add_option("--seed", o.seed, "rng seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--synth-train", o.synth_train, "synthetic train split size");
  cmd->add_option("--synth-test", o.synth_test, "synthetic test split size");
  cmd->add_option("--synth-hw", o.synth_hw, "synthetic image height/width");
  cmd->add_option("--synth-amplitude", o.synth_amplitude, "synthetic blob amplitude");
  cmd->add_option("--synth-noise", o.synth_noise, "synthetic pixel noise sigma");
  cmd->add_option("--limit-train", o.limit_train, "truncate the train split (0 = all)");
  cmd->add_option("--limit-test", o.limit_test, "truncate the test split (0 = all)");
  if (with_prune_flags) {
    cmd->add_option("--target-params-rate", o.target_params_rate,
                    "desired fraction of parameters to prune, in [0,1]");
    cmd->add_option("--target-mults-rate", o.target_mults_rate,
                    "desired fraction of multiplications to prune, in [0,1]");
    cmd->add_option("--lambda-mode", o.lambda_mode, "constant | heatup");
    cmd->add_option("--lambda-target", o.lambda_target, "auto | <float>");
    cmd->add_option("--threshold", o.threshold, "indicator threshold t");
    cmd->add_option("--fine-tune-epochs", o.fine_tune_epochs, "post-pruning epochs");
    cmd->add_option("--baseline-epochs", o.baseline_epochs,
                    "baseline epochs when no --init checkpoint is given");
    cmd->add_option("--init", o.init_checkpoint, "checkpoint directory of a pre-trained model");
  }
}

class ManifestWriter {
public:
  void set(const std::string& key, const std::string& value) { rows_.emplace_back(key, value); }
  void set(const std::string& key, double value) {
    std::ostringstream os;
    os << value;
    rows_.emplace_back(key, os.str());
  }
  void set(const std::string& key, int64_t value) { rows_.emplace_back(key, std::to_string(value)); }

  void write(const std::string& dir, bool success) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir + "/run.manifest", std::ios::binary);
    out << "status=" << (success ? "success" : "failure") << "\n";
    for (const auto& [k, v] : rows_) out << k << "=" << v << "\n";
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    out << "timestamp="
        << std::chrono::duration_cast<std::chrono::milliseconds>(now).count() << "\n";
  }

private:
  std::vector<std::pair<std::string, std::string>> rows_;
};

void echo_config(ManifestWriter& mf, const CommonOpts& o) {
  mf.set("arch", o.arch);
  mf.set("data", o.data);
  mf.set("seed", static_cast<int64_t>(o.seed));
  mf.set("epochs", static_cast<int64_t>(o.epochs));
  mf.set("batch_size", static_cast<int64_t>(o.batch_size));
  mf.set("lr_start", static_cast<double>(o.lr_start));
  mf.set("lr_end", static_cast<double>(o.lr_end));
}

/// Per-layer effective counts of a structurally pruned graph against the
/// original (pruning keeps every layer, so indices align).
ComplexitySnapshot pruned_vs_original(const NetworkGraph& original, const NetworkGraph& pruned) {
  const BaseComplexity orig = base_complexity(original);
  const BaseComplexity now = base_complexity(pruned);
  ComplexitySnapshot snap;
  snap.effective_params = now.total_params;
  snap.effective_mults = now.total_mults;
  for (size_t i = 0; i < pruned.layers.size(); ++i) {
    LayerComplexityRate row;
    row.layer_id = pruned.layers[i].id;
    row.kind = pruned.layers[i].kind;
    row.base_params = orig.per_layer_params[i];
    row.base_mults = orig.per_layer_mults[i];
    row.effective_params = now.per_layer_params[i];
    row.effective_mults = now.per_layer_mults[i];
    if (row.base_params > 0) {
      row.params_rate =
          1.0 - static_cast<double>(row.effective_params) / static_cast<double>(row.base_params);
    }
    if (row.base_mults > 0) {
      row.mults_rate =
          1.0 - static_cast<double>(row.effective_mults) / static_cast<double>(row.base_mults);
    }
    snap.per_layer.push_back(row);
  }
  return snap;
}

void validate_rates(const CommonOpts& o) {
  require(o.target_params_rate >= 0.0 && o.target_params_rate <= 1.0,
          "--target-params-rate must be in [0,1], got ", o.target_params_rate);
  require(o.target_mults_rate >= 0.0 && o.target_mults_rate <= 1.0,
          "--target-mults-rate must be in [0,1], got ", o.target_mults_rate);
}

int cmd_train_baseline(const CommonOpts& o) {
  const DataBundle data = load_data(o);
  const NetworkGraph graph =
      builtin_architecture(o.arch, data.train.num_classes, data.train.images.shape[1],
                           data.train.images.shape[2], data.train.images.shape[3]);
  TrainConfig cfg = make_config(o, 0, 0);
  Model model = init_model(graph, cfg.seed);
  const auto logs = train_baseline(model, data, cfg);
  const EvalResult eval = evaluate(model, data.test, cfg.batch_size);

  const std::string ckpt = o.out + "/baseline";
  save_checkpoint(model, ckpt);
  write_epoch_log_csv(o.out + "/epoch_log.csv", logs);

  ManifestWriter mf;
  mf.set("command", "train-baseline");
  echo_config(mf, o);
  mf.set("checkpoint", ckpt);
  mf.set("epoch_log", o.out + "/epoch_log.csv");
  mf.set("test_accuracy", eval.accuracy);
  mf.set("test_loss", eval.mean_loss);
  mf.write(o.out, true);
  std::cout << "baseline test accuracy " << eval.accuracy << ", checkpoint at " << ckpt << "\n";
  return 0;
}

int cmd_prune(const CommonOpts& o) {
  validate_rates(o);
  const DataBundle data = load_data(o);
  TrainConfig cfg = make_config(o, 0, 0);

  std::optional<Model> pretrained;
  NetworkGraph graph;
  if (!o.init_checkpoint.empty()) {
    pretrained = load_checkpoint(o.init_checkpoint);
    graph = pretrained->graph;
  } else {
    graph = builtin_architecture(o.arch, data.train.num_classes, data.train.images.shape[1],
                                 data.train.images.shape[2], data.train.images.shape[3]);
  }

  const HfpRunResult r = run_hfp(graph, data, cfg, pretrained ? &*pretrained : nullptr);
  if (r.lambda_degenerate) {
    std::cerr << "warning: pruning targets already met; lambda defaults to 1" << std::endl;
  }
  if (r.lambda_clamped) {
    std::cerr << "warning: measured lambda target below the heat-up start; clamped to "
              << r.lambda_target << std::endl;
  }

  const std::string baseline_ckpt = o.out + "/baseline";
  const std::string pruned_ckpt = o.out + "/pruned";
  save_checkpoint(r.baseline, baseline_ckpt);
  save_checkpoint(r.model, pruned_ckpt);
  write_epoch_log_csv(o.out + "/epoch_log.csv", r.logs);
  write_layer_rates_csv(o.out + "/layer_rates.csv", r.logs);
  write_layer_report_csv(o.out + "/layer_report.csv",
                         layer_report(pruned_vs_original(graph, r.model.graph), r.base));

  ManifestWriter mf;
  mf.set("command", "prune");
  echo_config(mf, o);
  mf.set("target_params_rate", o.target_params_rate);
  mf.set("target_mults_rate", o.target_mults_rate);
  mf.set("threshold", o.threshold);
  mf.set("lambda_mode", o.lambda_mode);
  mf.set("lambda_target", r.lambda_target);
  mf.set("fine_tune_epochs", static_cast<int64_t>(o.fine_tune_epochs));
  mf.set("baseline_checkpoint", baseline_ckpt);
  mf.set("pruned_checkpoint", pruned_ckpt);
  mf.set("epoch_log", o.out + "/epoch_log.csv");
  mf.set("layer_rates", o.out + "/layer_rates.csv");
  mf.set("layer_report", o.out + "/layer_report.csv");
  mf.set("achieved_params_rate", r.achieved_params_rate);
  mf.set("achieved_mults_rate", r.achieved_mults_rate);
  mf.set("final_pruning_loss", r.final_pruning_loss);
  mf.set("baseline_test_accuracy", r.baseline_eval.accuracy);
  mf.set("post_prune_test_accuracy", r.post_prune_eval.accuracy);
  mf.set("final_test_accuracy", r.final_eval.accuracy);
  mf.write(o.out, true);

  std::cout << "pruned: params rate " << r.achieved_params_rate << " (target "
            << o.target_params_rate << "), mults rate " << r.achieved_mults_rate << " (target "
            << o.target_mults_rate << "), final accuracy " << r.final_eval.accuracy
            << " (baseline " << r.baseline_eval.accuracy << ")\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint) {
  const DataBundle data = load_data(o);
  Model model = load_checkpoint(checkpoint);
  const EvalResult r = evaluate(model, data.test, o.batch_size);
  const BaseComplexity base = base_complexity(model.graph);
  std::cout << "accuracy " << r.accuracy << " loss " << r.mean_loss << " params "
            << base.total_params << " mults " << base.total_mults << "\n";
  return 0;
}

int cmd_export(const CommonOpts& o, const std::string& checkpoint) {
  Model model = load_checkpoint(checkpoint);
  Model folded = fold_batchnorm(model);
  const std::string out_dir = o.out + "/folded";
  save_checkpoint(folded, out_dir);
  ManifestWriter mf;
  mf.set("command", "export");
  mf.set("input_checkpoint", checkpoint);
  mf.set("folded_checkpoint", out_dir);
  mf.write(o.out, true);
  std::cout << "folded model written to " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out_dir) {
  // Regenerate the per-layer report from the run's checkpoints.
  std::ifstream mf(run_dir + "/run.manifest");
  require(mf.good(), "report: cannot read ", run_dir, "/run.manifest");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(mf, line)) {
    const size_t eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  require(kv.count("baseline_checkpoint") && kv.count("pruned_checkpoint"), "report: ", run_dir,
          " is not a prune run directory");
  Model baseline = load_checkpoint(kv["baseline_checkpoint"]);
  Model pruned = load_checkpoint(kv["pruned_checkpoint"]);
  const std::string dir = out_dir.empty() ? run_dir : out_dir;
  write_layer_report_csv(dir + "/layer_report.csv",
                         layer_report(pruned_vs_original(baseline.graph, pruned.graph),
                                      base_complexity(baseline.graph)));
  std::cout << "layer report regenerated in " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hfp: budget-driven structured filter pruning for small CNNs"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string checkpoint, run_dir, report_out;

  CLI::App* train = app.add_subcommand("train-baseline", "train a dense baseline model");
  add_common_flags(train, o, false);

  CLI::App* prune = app.add_subcommand(
      "prune", "baseline -> sparsity learning -> structural pruning -> fine-tune");
  add_common_flags(prune, o, true);

  CLI::App* eval = app.add_subcommand("eval", "accuracy and complexity of a checkpoint");
  add_common_flags(eval, o, false);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  CLI::App* report = app.add_subcommand("report", "regenerate CSV reports for a prune run");
  report->add_option("--run", run_dir, "prune run directory")->required();
  report->add_option("--out", report_out, "output directory (default: the run directory)");

  CLI::App* exp = app.add_subcommand("export", "fold batch norm and write the inference model");
  exp->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  exp->add_option("--out", o.out, "output directory");

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train_baseline(o);
    if (prune->parsed()) return cmd_prune(o);
    if (eval->parsed()) return cmd_eval(o, checkpoint);
    if (report->parsed()) return cmd_report(run_dir, report_out);
    if (exp->parsed()) return cmd_export(o, checkpoint);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
