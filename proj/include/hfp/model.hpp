// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Runtime model: parameters bound to a NetworkGraph, seeded initialization,
// the full forward pass and simple batched evaluation.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hfp/autodiff.hpp"
#include "hfp/graph.hpp"
#include "hfp/pruning.hpp"
#include "hfp/tensor.hpp"

namespace hfp {

struct WeightedLayer {
  Param weight;
  Param bias;
};

struct Model {
  NetworkGraph graph;
  std::map<int, WeightedLayer> weighted;  // conv/fc layer id -> weight + bias
  std::map<int, BatchNormState> norms;    // batchnorm layer id -> state

  /// All trainable parameters in layer order (weight, bias, gamma, beta).
  std::vector<Param*> parameters();
  /// Gamma values of every batch-norm layer, keyed by layer id.
  GammaMap gammas() const;
  int64_t parameter_count() const;
};

/// Fan-in-scaled uniform init for weights, zero biases, gamma 1, beta 0.
Model init_model(const NetworkGraph& graph, uint64_t seed);

/// Builds the forward pass on the tape and returns the logits value.
Value forward(Model& model, Tape& tape, const Tensor& images, BnMode mode);

/// Logits for a batch without recording gradients anywhere persistent.
std::vector<float> predict_logits(Model& model, const Tensor& images, BnMode mode);

struct EvalResult {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct Dataset;  // data.hpp

/// Inference-mode loss and accuracy over a dataset.
EvalResult evaluate(Model& model, const Dataset& data, int batch_size);

}  // namespace hfp
