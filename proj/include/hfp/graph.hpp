// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Declarative network architecture: ordered layer specifications, shortcut
// groups, spatial-shape inference, parameter/multiplication bookkeeping and a
// line-oriented text serialization.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hfp/error.hpp"

namespace hfp {

enum class LayerKind { Conv, Fc, BatchNorm, Relu, MaxPool, Gap, Add };

std::string to_string(LayerKind k);
std::optional<LayerKind> layer_kind_from(const std::string& name);

struct LayerSpec {
  int id = -1;
  LayerKind kind = LayerKind::Conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;   // conv / maxpool
  int stride = 1;
  int padding = 0;
  std::vector<int> preds;  // empty = network input

  // Derived by validate(): input/output spatial size and flatness. Flat
  // tensors are [N,C]; spatial tensors are [N,C,H,W].
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;
  bool flat_in = false;
  bool flat_out = false;
};

struct NetworkGraph {
  std::vector<LayerSpec> layers;  // topologically ordered: preds precede users
  std::vector<std::vector<int>> shortcut_groups;  // batch-norm layer ids
  int num_classes = 0;
  int input_channels = 0;
  int input_height = 0;
  int input_width = 0;

  const LayerSpec* find(int id) const;
  LayerSpec* find(int id);
  /// Layer ids that consume layer `id` as a predecessor.
  std::vector<int> consumers(int id) const;
  /// The single sink layer id (the classifier output).
  int output_layer() const;
};

struct Diagnostics {
  std::vector<std::string> issues;
  bool ok() const { return issues.empty(); }
  std::string joined() const;
};

/// Checks all structural invariants and infers spatial shapes in place.
Diagnostics validate(NetworkGraph& graph);

/// Validates and throws on the first diagnostic.
void validate_or_throw(NetworkGraph& graph);

struct BaseComplexity {
  std::vector<int64_t> per_layer_params;  // indexed like graph.layers
  std::vector<int64_t> per_layer_mults;
  int64_t total_params = 0;
  int64_t total_mults = 0;
};

/// P_l/M_l bookkeeping: conv P_l = Cin*Cout*k^2, M_l = P_l*H'*W';
/// fc P_l = M_l = in*out. Other layers contribute zero. Requires a validated
/// graph (spatial shapes present).
BaseComplexity base_complexity(const NetworkGraph& graph);

std::string serialize(const NetworkGraph& graph);
NetworkGraph deserialize(const std::string& text);

/// Builtin desk-scale architectures. `tinyvgg` is a plain conv/fc stack,
/// `tinyresnet` adds residual blocks whose merging branches both end in
/// batch norm (those BNs form shortcut groups).
NetworkGraph builtin_architecture(const std::string& name, int num_classes, int input_channels,
                                  int input_height, int input_width);

}  // namespace hfp
