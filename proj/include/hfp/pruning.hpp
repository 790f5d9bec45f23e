// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparsity machinery: the magnitude indicator with its sign-flipped
// straight-through gradient, shortcut-group channel masks, exact effective
// parameter/multiplication counting, the rectified pruning loss and its
// analytic gamma gradient, and the lambda schedule.

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "hfp/graph.hpp"

namespace hfp {

constexpr double kDefaultThreshold = 1e-4;

/// 0 if |gamma| <= t, 1 otherwise.
int indicator(double gamma, double t);

/// Straight-through gradient of the indicator, flipped on the y-axis:
/// -1 if gamma <= 0, +1 if gamma > 0.
double indicator_ste_grad(double gamma);

/// Per-BN-layer bit vector of active channels (1 = active).
struct ChannelMask {
  int layer_id = -1;
  std::vector<uint8_t> bits;
};

/// Shared mask for batch-norm layers joined by shortcut connections: bit c is
/// the indicator of the element-wise sum of |gamma| over the members.
ChannelMask group_mask(const std::vector<std::vector<double>>& gammas, double t);

/// gamma arrays keyed by batch-norm layer id.
using GammaMap = std::map<int, std::vector<double>>;
/// Active-channel bits keyed by batch-norm layer id. Shortcut-group members
/// carry identical bit vectors.
using MaskSet = std::map<int, std::vector<uint8_t>>;

/// One mask slot per ungrouped batch-norm layer and one per shortcut group.
/// Weighted (conv/fc) layers reference slots through the channels they read
/// and produce; a slot id of -1 means "always fully active".
struct MaskSlots {
  int count = 0;
  std::map<int, int> slot_of_bn;            // bn layer id -> slot
  std::vector<int> slot_channels;           // slot -> channel count
  std::vector<std::vector<int>> slot_members;  // slot -> bn layer ids
  std::map<int, int> in_slot;               // conv/fc layer id -> slot or -1
  std::map<int, int> out_slot;              // conv/fc layer id -> slot or -1
};

/// Derives the slot structure from a validated graph. Throws if an add
/// junction merges branches whose masks are not shared through one shortcut
/// group, or if a weighted layer's output is only partially normalized.
MaskSlots compute_mask_slots(const NetworkGraph& graph);

/// Applies the (group-aware) indicator to the gamma values of every
/// batch-norm layer.
MaskSet masks_from_gammas(const NetworkGraph& graph, const GammaMap& gammas, double t);

struct PruningTargets {
  int64_t target_params = 0;
  int64_t target_mults = 0;
  double threshold = kDefaultThreshold;
};

struct LayerComplexityRate {
  int layer_id = -1;
  LayerKind kind = LayerKind::Conv;
  int64_t base_params = 0;
  int64_t base_mults = 0;
  int64_t effective_params = 0;
  int64_t effective_mults = 0;
  double params_rate = 0.0;  // pruned fraction, 1 - kept
  double mults_rate = 0.0;
};

struct ComplexitySnapshot {
  int64_t effective_params = 0;
  int64_t effective_mults = 0;
  std::vector<LayerComplexityRate> per_layer;
  int epoch = 0;
};

/// Exact surviving-weight / surviving-multiplication counts under the masks.
/// Input channels of the first layer and output channels of the classifier
/// are always fully active.
ComplexitySnapshot effective_complexity(const NetworkGraph& graph, const MaskSet& masks,
                                        int epoch = 0);
int64_t effective_params(const NetworkGraph& graph, const MaskSet& masks);
int64_t effective_mults(const NetworkGraph& graph, const MaskSet& masks);

/// relu((P~ - P*)/P) + relu((M~ - M*)/M); zero exactly when both budgets are
/// met.
double pruning_loss(const ComplexitySnapshot& snapshot, const PruningTargets& targets,
                    const BaseComplexity& base);

/// d(pruning loss)/d(gamma) per batch-norm channel: the exact partial of the
/// loss through the relaxed counting expression, times the straight-through
/// gradient of the indicator. Group members share one relaxed slot per
/// channel. The rectifier subgradient at zero excess is zero.
GammaMap pruning_loss_grad_gamma(const NetworkGraph& graph, const GammaMap& gammas,
                                 const MaskSet& masks, const PruningTargets& targets,
                                 const BaseComplexity& base);

struct LambdaSchedule {
  enum class Mode { Constant, LinearHeatup };
  Mode mode = Mode::Constant;
  double start_value = 1.0;
  double target_value = 1.0;
  int total_epochs = 1;
};

/// Constant mode returns the target; heat-up interpolates linearly from
/// start to target over the epochs, clamped at the target.
double lambda_at(const LambdaSchedule& schedule, int epoch);

}  // namespace hfp
