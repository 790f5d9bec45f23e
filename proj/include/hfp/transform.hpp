// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-training structural transformations: zeroing inactive channels,
// physically deleting channels from graph and weights, and folding batch
// norm into the preceding weighted layer for inference export.

#pragma once

#include <map>
#include <vector>

#include "hfp/model.hpp"
#include "hfp/pruning.hpp"

namespace hfp {

/// Group-aware masks from the model's current gamma values.
MaskSet current_masks(const Model& model, double t);

/// Sets gamma and beta to exactly zero wherever the (group-aware) mask bit
/// is zero.
void zero_inactive(Model& model, double t);

struct PrunePlan {
  // Kept channel indices per batch-norm layer, strictly increasing and
  // non-empty. Shortcut-group members carry identical lists.
  std::map<int, std::vector<int>> keep;
  // Layers where the empty-mask guard kept the single largest-|gamma|
  // channel.
  std::vector<int> guarded;
};

/// Keep lists from the active channels per BN slot. If a slot would lose all
/// channels, the single channel with the largest |gamma| (largest summed
/// |gamma| for groups) is kept and the layer flagged.
PrunePlan make_plan(const Model& model, double t);

/// Deletes pruned channels: the producing conv/fc drops output filters, the
/// batch norm drops its per-channel entries, and every consumer drops the
/// matching input slices. The returned model validates.
Model structural_prune(const Model& model, const PrunePlan& plan);

/// Absorbs every batch norm into its preceding conv/fc (inference only):
/// w' = w * gamma / sqrt(var + eps), b' = (b - mean) * gamma / sqrt(var +
/// eps) + beta. Batch-norm layers are removed from the graph.
Model fold_batchnorm(const Model& model);

}  // namespace hfp
