// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/transform.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hfp/error.hpp"

namespace hfp {

MaskSet current_masks(const Model& model, double t) {
  return masks_from_gammas(model.graph, model.gammas(), t);
}

void zero_inactive(Model& model, double t) {
  const MaskSet masks = current_masks(model, t);
  for (auto& [id, state] : model.norms) {
    const std::vector<uint8_t>& bits = masks.at(id);
    for (size_t c = 0; c < bits.size(); ++c) {
      if (!bits[c]) {
        state.gamma.value[c] = 0.0f;
        state.beta.value[c] = 0.0f;
      }
    }
  }
}

PrunePlan make_plan(const Model& model, double t) {
  const MaskSlots slots = compute_mask_slots(model.graph);
  const MaskSet masks = current_masks(model, t);
  PrunePlan plan;
  for (int s = 0; s < slots.count; ++s) {
    const std::vector<int>& members = slots.slot_members[static_cast<size_t>(s)];
    const std::vector<uint8_t>& bits = masks.at(members[0]);
    std::vector<int> keep;
    for (size_t c = 0; c < bits.size(); ++c) {
      if (bits[c]) keep.push_back(static_cast<int>(c));
    }
    if (keep.empty()) {
      // Keep the channel with the largest summed |gamma| across members.
      size_t best = 0;
      double best_mag = -1.0;
      for (size_t c = 0; c < bits.size(); ++c) {
        double mag = 0.0;
        for (int id : members) mag += std::abs(static_cast<double>(model.norms.at(id).gamma.value[c]));
        if (mag > best_mag) {
          best_mag = mag;
          best = c;
        }
      }
      keep.push_back(static_cast<int>(best));
      for (int id : members) plan.guarded.push_back(id);
    }
    for (int id : members) plan.keep[id] = keep;
  }
  return plan;
}

namespace {

/// Selects rows of a [C, stride] view: keeps `keep` out of `channels` blocks.
std::vector<float> take_blocks(const std::vector<float>& src, int channels, int64_t block,
                               const std::vector<int>& keep) {
  std::vector<float> out(static_cast<size_t>(keep.size()) * static_cast<size_t>(block));
  for (size_t i = 0; i < keep.size(); ++i) {
    const int64_t from = static_cast<int64_t>(keep[i]) * block;
    std::copy(src.begin() + from, src.begin() + from + block,
              out.begin() + static_cast<int64_t>(i) * block);
  }
  (void)channels;
  return out;
}

void check_keep_list(const std::vector<int>& keep, int channels, int layer_id) {
  require(!keep.empty(), "prune plan: empty keep list for layer ", layer_id);
  int prev = -1;
  for (int k : keep) {
    require(k > prev, "prune plan: keep list for layer ", layer_id, " is not strictly increasing");
    require(k >= 0 && k < channels, "prune plan: keep index ", k, " out of range for layer ",
            layer_id, " with ", channels, " channels");
    prev = k;
  }
}

}  // namespace

Model structural_prune(const Model& model, const PrunePlan& plan) {
  const MaskSlots slots = compute_mask_slots(model.graph);
  for (const auto& [id, keep] : plan.keep) {
    const LayerSpec* l = model.graph.find(id);
    require(l && l->kind == LayerKind::BatchNorm, "prune plan: layer ", id, " is not a batchnorm");
    check_keep_list(keep, l->out_channels, id);
  }
  for (int s = 0; s < slots.count; ++s) {
    const std::vector<int>& members = slots.slot_members[static_cast<size_t>(s)];
    auto first = plan.keep.find(members[0]);
    require(first != plan.keep.end(), "prune plan: missing keep list for batchnorm layer ",
            members[0]);
    for (int id : members) {
      auto it = plan.keep.find(id);
      require(it != plan.keep.end() && it->second == first->second,
              "prune plan: shortcut-group members must share one keep list (layer ", id, ")");
    }
  }

  Model out;
  out.graph = model.graph;

  // New channel count carried by each slot.
  std::vector<int> slot_kept(static_cast<size_t>(slots.count));
  for (int s = 0; s < slots.count; ++s) {
    slot_kept[static_cast<size_t>(s)] =
        static_cast<int>(plan.keep.at(slots.slot_members[static_cast<size_t>(s)][0]).size());
  }

  for (const auto& l : model.graph.layers) {
    if (l.kind == LayerKind::BatchNorm) {
      const std::vector<int>& keep = plan.keep.at(l.id);
      const BatchNormState& src = model.norms.at(l.id);
      BatchNormState dst("layer" + std::to_string(l.id), static_cast<int>(keep.size()));
      dst.epsilon = src.epsilon;
      dst.momentum = src.momentum;
      for (size_t i = 0; i < keep.size(); ++i) {
        const size_t c = static_cast<size_t>(keep[i]);
        dst.gamma.value[i] = src.gamma.value[c];
        dst.beta.value[i] = src.beta.value[c];
        dst.running_mean[i] = src.running_mean[c];
        dst.running_var[i] = src.running_var[c];
      }
      out.norms.emplace(l.id, std::move(dst));
      LayerSpec* nl = out.graph.find(l.id);
      nl->in_channels = nl->out_channels = static_cast<int>(keep.size());
    } else if (l.kind == LayerKind::Conv || l.kind == LayerKind::Fc) {
      const WeightedLayer& src = model.weighted.at(l.id);
      std::vector<float> weight = src.weight.value;
      std::vector<float> bias = src.bias.value;
      int in_ch = l.in_channels, out_ch = l.out_channels;

      // Drop input slices if the input mask slot was pruned.
      const int in_slot = slots.in_slot.at(l.id);
      if (in_slot >= 0 && slot_kept[static_cast<size_t>(in_slot)] !=
                              slots.slot_channels[static_cast<size_t>(in_slot)]) {
        const std::vector<int>& keep =
            plan.keep.at(slots.slot_members[static_cast<size_t>(in_slot)][0]);
        const int slot_ch = slots.slot_channels[static_cast<size_t>(in_slot)];
        const int64_t block = l.in_channels / slot_ch;  // >1 for fc over spatial maps
        const int64_t per_in = l.kind == LayerKind::Conv
                                   ? static_cast<int64_t>(l.kernel) * l.kernel
                                   : 1;
        // weight rows are [out][in][per_in]; select `keep` blocks per row
        const int64_t row = static_cast<int64_t>(in_ch) * per_in;
        std::vector<float> next(static_cast<size_t>(out_ch) * keep.size() * block * per_in);
        for (int o = 0; o < out_ch; ++o) {
          const std::vector<float> row_src(weight.begin() + o * row, weight.begin() + (o + 1) * row);
          const std::vector<float> kept = take_blocks(row_src, slot_ch, block * per_in, keep);
          std::copy(kept.begin(), kept.end(),
                    next.begin() + static_cast<int64_t>(o) * static_cast<int64_t>(kept.size()));
        }
        weight = std::move(next);
        in_ch = static_cast<int>(keep.size() * block);
      }

      // Drop output filters if this layer feeds a pruned batch norm.
      const int out_slot = slots.out_slot.at(l.id);
      if (out_slot >= 0 && slot_kept[static_cast<size_t>(out_slot)] !=
                               slots.slot_channels[static_cast<size_t>(out_slot)]) {
        const std::vector<int>& keep =
            plan.keep.at(slots.slot_members[static_cast<size_t>(out_slot)][0]);
        const int64_t row = static_cast<int64_t>(weight.size()) / out_ch;
        weight = take_blocks(weight, out_ch, row, keep);
        bias = take_blocks(bias, out_ch, 1, keep);
        out_ch = static_cast<int>(keep.size());
      }

      WeightedLayer dst;
      const std::string prefix = "layer" + std::to_string(l.id);
      if (l.kind == LayerKind::Conv) {
        dst.weight = Param(prefix + ".weight", {out_ch, in_ch, l.kernel, l.kernel});
      } else {
        dst.weight = Param(prefix + ".weight", {out_ch, in_ch});
      }
      dst.bias = Param(prefix + ".bias", {out_ch});
      require(dst.weight.value.size() == weight.size(), "structural_prune: weight bookkeeping bug");
      dst.weight.value = std::move(weight);
      dst.bias.value = std::move(bias);
      out.weighted.emplace(l.id, std::move(dst));
      LayerSpec* nl = out.graph.find(l.id);
      nl->in_channels = in_ch;
      nl->out_channels = out_ch;
    }
  }

  validate_or_throw(out.graph);
  return out;
}

Model fold_batchnorm(const Model& model) {
  Model out;
  out.graph = model.graph;
  for (const auto& [id, wl] : model.weighted) {
    WeightedLayer copy;
    copy.weight = wl.weight;
    copy.bias = wl.bias;
    out.weighted.emplace(id, std::move(copy));
  }

  std::map<int, int> rewire;  // bn layer id -> its predecessor id
  for (const auto& l : model.graph.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    const LayerSpec* pred = model.graph.find(l.preds[0]);
    require(pred && (pred->kind == LayerKind::Conv || pred->kind == LayerKind::Fc),
            "fold_batchnorm: batchnorm layer ", l.id,
            " does not directly follow a conv or fc layer");
    const BatchNormState& st = model.norms.at(l.id);
    WeightedLayer& wl = out.weighted.at(pred->id);
    const int out_ch = pred->out_channels;
    const int64_t row = static_cast<int64_t>(wl.weight.value.size()) / out_ch;
    for (int c = 0; c < out_ch; ++c) {
      const float scale =
          st.gamma.value[static_cast<size_t>(c)] /
          std::sqrt(st.running_var[static_cast<size_t>(c)] + st.epsilon);
      float* wp = wl.weight.value.data() + static_cast<int64_t>(c) * row;
      for (int64_t i = 0; i < row; ++i) wp[i] *= scale;
      wl.bias.value[static_cast<size_t>(c)] =
          (wl.bias.value[static_cast<size_t>(c)] - st.running_mean[static_cast<size_t>(c)]) * scale +
          st.beta.value[static_cast<size_t>(c)];
    }
    rewire[l.id] = pred->id;
  }

  // Remove the BN layers and reconnect their consumers to the producers.
  std::vector<LayerSpec> kept;
  for (const auto& l : out.graph.layers) {
    if (l.kind == LayerKind::BatchNorm) continue;
    LayerSpec nl = l;
    for (int& p : nl.preds) {
      auto it = rewire.find(p);
      if (it != rewire.end()) p = it->second;
    }
    kept.push_back(nl);
  }
  out.graph.layers = std::move(kept);
  out.graph.shortcut_groups.clear();
  validate_or_throw(out.graph);
  return out;
}

}  // namespace hfp
