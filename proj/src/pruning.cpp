// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/pruning.hpp"

#include <algorithm>
#include <cmath>

#include "hfp/error.hpp"

namespace hfp {

int indicator(double gamma, double t) {
  require(t > 0, "indicator: threshold must be positive, got ", t);
  return std::abs(gamma) <= t ? 0 : 1;
}

double indicator_ste_grad(double gamma) { return gamma <= 0.0 ? -1.0 : 1.0; }

ChannelMask group_mask(const std::vector<std::vector<double>>& gammas, double t) {
  require(!gammas.empty(), "group_mask: needs at least one member");
  const size_t c = gammas[0].size();
  for (const auto& g : gammas) {
    require(g.size() == c, "group_mask: member length ", g.size(), " does not match ", c);
  }
  ChannelMask mask;
  mask.bits.resize(c);
  for (size_t i = 0; i < c; ++i) {
    double acc = 0.0;
    for (const auto& g : gammas) acc += std::abs(g[i]);
    mask.bits[i] = static_cast<uint8_t>(indicator(acc, t));
  }
  return mask;
}

MaskSlots compute_mask_slots(const NetworkGraph& g) {
  MaskSlots slots;

  // One slot per shortcut group, then one per remaining batch-norm layer.
  for (const auto& grp : g.shortcut_groups) {
    const int slot = slots.count++;
    int channels = 0;
    for (int id : grp) {
      const LayerSpec* l = g.find(id);
      require(l && l->kind == LayerKind::BatchNorm, "mask slots: group member ", id,
              " is not a batchnorm layer");
      slots.slot_of_bn[id] = slot;
      channels = l->out_channels;
    }
    slots.slot_channels.push_back(channels);
    slots.slot_members.push_back(grp);
  }
  for (const auto& l : g.layers) {
    if (l.kind != LayerKind::BatchNorm || slots.slot_of_bn.count(l.id)) continue;
    const int slot = slots.count++;
    slots.slot_of_bn[l.id] = slot;
    slots.slot_channels.push_back(l.out_channels);
    slots.slot_members.push_back({l.id});
  }

  // The slot carried by each layer's output channels.
  std::map<int, int> carrier;
  for (const auto& l : g.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Fc:
        carrier[l.id] = -1;
        break;
      case LayerKind::BatchNorm:
        carrier[l.id] = slots.slot_of_bn.at(l.id);
        break;
      case LayerKind::Relu:
      case LayerKind::MaxPool:
      case LayerKind::Gap:
        carrier[l.id] = carrier.at(l.preds[0]);
        break;
      case LayerKind::Add: {
        const int first = carrier.at(l.preds[0]);
        for (int p : l.preds) {
          require(carrier.at(p) == first, "mask slots: add layer ", l.id,
                  " merges branches with different channel masks; the branch batchnorm layers "
                  "must share one shortcut group");
        }
        carrier[l.id] = first;
        break;
      }
    }
  }

  for (const auto& l : g.layers) {
    if (l.kind != LayerKind::Conv && l.kind != LayerKind::Fc) continue;
    slots.in_slot[l.id] = l.preds.empty() ? -1 : carrier.at(l.preds[0]);
    // The output slot is the batch norm that directly normalizes this layer,
    // if there is one. A weighted layer feeding both a batch norm and other
    // consumers would be only partially masked, which the counting cannot
    // represent.
    int out = -1;
    const std::vector<int> users = g.consumers(l.id);
    for (int u : users) {
      const LayerSpec* ul = g.find(u);
      if (ul->kind == LayerKind::BatchNorm) {
        require(users.size() == 1, "mask slots: layer ", l.id,
                " feeds a batchnorm plus other consumers; its mask would be inconsistent");
        out = slots.slot_of_bn.at(u);
      }
    }
    slots.out_slot[l.id] = out;
  }
  return slots;
}

MaskSet masks_from_gammas(const NetworkGraph& g, const GammaMap& gammas, double t) {
  const MaskSlots slots = compute_mask_slots(g);
  MaskSet masks;
  for (int s = 0; s < slots.count; ++s) {
    std::vector<std::vector<double>> member_gammas;
    for (int id : slots.slot_members[static_cast<size_t>(s)]) {
      auto it = gammas.find(id);
      require(it != gammas.end(), "masks_from_gammas: missing gamma values for batchnorm layer ", id);
      require(static_cast<int>(it->second.size()) == slots.slot_channels[static_cast<size_t>(s)],
              "masks_from_gammas: gamma length mismatch for layer ", id);
      member_gammas.push_back(it->second);
    }
    const ChannelMask m = group_mask(member_gammas, t);
    for (int id : slots.slot_members[static_cast<size_t>(s)]) masks[id] = m.bits;
  }
  return masks;
}

namespace {

struct SlotState {
  std::vector<int> active;  // per slot: number of active channels
};

SlotState slot_state(const NetworkGraph& g, const MaskSlots& slots, const MaskSet& masks) {
  SlotState st;
  st.active.assign(static_cast<size_t>(slots.count), 0);
  for (int s = 0; s < slots.count; ++s) {
    const std::vector<int>& members = slots.slot_members[static_cast<size_t>(s)];
    const int channels = slots.slot_channels[static_cast<size_t>(s)];
    const std::vector<uint8_t>* bits = nullptr;
    for (int id : members) {
      auto it = masks.find(id);
      require(it != masks.end(), "effective counting: missing mask for batchnorm layer ", id);
      require(static_cast<int>(it->second.size()) == channels,
              "effective counting: mask length mismatch for batchnorm layer ", id);
      if (!bits) {
        bits = &it->second;
      } else {
        require(*bits == it->second, "effective counting: shortcut-group members of layer ", id,
                " carry different masks");
      }
    }
    int a = 0;
    for (uint8_t bit : *bits) a += bit ? 1 : 0;
    st.active[static_cast<size_t>(s)] = a;
  }
  (void)g;
  return st;
}

}  // namespace

ComplexitySnapshot effective_complexity(const NetworkGraph& g, const MaskSet& masks, int epoch) {
  const MaskSlots slots = compute_mask_slots(g);
  const SlotState st = slot_state(g, slots, masks);
  const BaseComplexity base = base_complexity(g);

  ComplexitySnapshot snap;
  snap.epoch = epoch;
  for (size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    LayerComplexityRate row;
    row.layer_id = l.id;
    row.kind = l.kind;
    row.base_params = base.per_layer_params[i];
    row.base_mults = base.per_layer_mults[i];
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Fc) {
      const int in_slot = slots.in_slot.at(l.id);
      const int out_slot = slots.out_slot.at(l.id);
      int64_t a_in = l.in_channels;
      if (in_slot >= 0) {
        const int slot_ch = slots.slot_channels[static_cast<size_t>(in_slot)];
        require(l.in_channels % slot_ch == 0, "effective counting: layer ", l.id, " input width ",
                l.in_channels, " is not a multiple of its mask width ", slot_ch);
        const int64_t block = l.in_channels / slot_ch;
        a_in = static_cast<int64_t>(st.active[static_cast<size_t>(in_slot)]) * block;
      }
      const int64_t a_out =
          out_slot >= 0 ? st.active[static_cast<size_t>(out_slot)] : l.out_channels;
      if (l.kind == LayerKind::Conv) {
        row.effective_params = a_in * a_out * l.kernel * l.kernel;
        row.effective_mults = row.effective_params * l.out_h * l.out_w;
      } else {
        row.effective_params = a_in * a_out;
        row.effective_mults = row.effective_params;
      }
      if (row.base_params > 0) {
        row.params_rate = 1.0 - static_cast<double>(row.effective_params) /
                                    static_cast<double>(row.base_params);
      }
      if (row.base_mults > 0) {
        row.mults_rate =
            1.0 - static_cast<double>(row.effective_mults) / static_cast<double>(row.base_mults);
      }
    }
    snap.effective_params += row.effective_params;
    snap.effective_mults += row.effective_mults;
    snap.per_layer.push_back(row);
  }
  return snap;
}

int64_t effective_params(const NetworkGraph& g, const MaskSet& masks) {
  return effective_complexity(g, masks).effective_params;
}

int64_t effective_mults(const NetworkGraph& g, const MaskSet& masks) {
  return effective_complexity(g, masks).effective_mults;
}

double pruning_loss(const ComplexitySnapshot& snapshot, const PruningTargets& targets,
                    const BaseComplexity& base) {
  require(base.total_params > 0 && base.total_mults > 0,
          "pruning_loss: base complexity totals must be positive");
  const double p_excess = static_cast<double>(snapshot.effective_params - targets.target_params) /
                          static_cast<double>(base.total_params);
  const double m_excess = static_cast<double>(snapshot.effective_mults - targets.target_mults) /
                          static_cast<double>(base.total_mults);
  return std::max(0.0, p_excess) + std::max(0.0, m_excess);
}

GammaMap pruning_loss_grad_gamma(const NetworkGraph& g, const GammaMap& gammas,
                                 const MaskSet& masks, const PruningTargets& targets,
                                 const BaseComplexity& base) {
  const MaskSlots slots = compute_mask_slots(g);

  // The provided masks must be the indicator of the provided gammas,
  // otherwise the loss and its gradient would describe different models.
  {
    const MaskSet expected = masks_from_gammas(g, gammas, targets.threshold);
    for (const auto& [id, bits] : expected) {
      auto it = masks.find(id);
      require(it != masks.end() && it->second == bits,
              "pruning_loss_grad_gamma: mask for batchnorm layer ", id,
              " is inconsistent with the gamma values");
    }
  }

  const SlotState st = slot_state(g, slots, masks);
  const ComplexitySnapshot snap = effective_complexity(g, masks);

  const bool p_active = snap.effective_params > targets.target_params;
  const bool m_active = snap.effective_mults > targets.target_mults;

  // d(P~)/d(phi_s) and d(M~)/d(phi_s): each slot's relaxed per-channel
  // derivative; identical for all channels of the slot because the counting
  // is bilinear in the per-slot sums.
  std::vector<double> dp(static_cast<size_t>(slots.count), 0.0);
  std::vector<double> dm(static_cast<size_t>(slots.count), 0.0);
  const BaseComplexity bc = base_complexity(g);
  for (size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.kind != LayerKind::Conv && l.kind != LayerKind::Fc) continue;
    const int in_slot = slots.in_slot.at(l.id);
    const int out_slot = slots.out_slot.at(l.id);
    const double f_in =
        in_slot < 0 ? 1.0
                    : static_cast<double>(st.active[static_cast<size_t>(in_slot)]) /
                          static_cast<double>(slots.slot_channels[static_cast<size_t>(in_slot)]);
    const double f_out =
        out_slot < 0 ? 1.0
                     : static_cast<double>(st.active[static_cast<size_t>(out_slot)]) /
                           static_cast<double>(slots.slot_channels[static_cast<size_t>(out_slot)]);
    const double pl = static_cast<double>(bc.per_layer_params[i]);
    const double ml = static_cast<double>(bc.per_layer_mults[i]);
    if (out_slot >= 0) {
      const double c = static_cast<double>(slots.slot_channels[static_cast<size_t>(out_slot)]);
      dp[static_cast<size_t>(out_slot)] += pl * f_in / c;
      dm[static_cast<size_t>(out_slot)] += ml * f_in / c;
    }
    if (in_slot >= 0) {
      const double c = static_cast<double>(slots.slot_channels[static_cast<size_t>(in_slot)]);
      dp[static_cast<size_t>(in_slot)] += pl * f_out / c;
      dm[static_cast<size_t>(in_slot)] += ml * f_out / c;
    }
  }

  GammaMap grads;
  for (const auto& [id, gamma] : gammas) {
    auto sit = slots.slot_of_bn.find(id);
    require(sit != slots.slot_of_bn.end(), "pruning_loss_grad_gamma: layer ", id,
            " is not a batchnorm layer of this graph");
    const int s = sit->second;
    double dl_dphi = 0.0;
    if (p_active) dl_dphi += dp[static_cast<size_t>(s)] / static_cast<double>(base.total_params);
    if (m_active) dl_dphi += dm[static_cast<size_t>(s)] / static_cast<double>(base.total_mults);
    std::vector<double> grad(gamma.size());
    for (size_t c = 0; c < gamma.size(); ++c) grad[c] = dl_dphi * indicator_ste_grad(gamma[c]);
    grads[id] = std::move(grad);
  }
  return grads;
}

double lambda_at(const LambdaSchedule& schedule, int epoch) {
  require(schedule.start_value > 0, "lambda schedule: start value must be positive");
  if (schedule.mode == LambdaSchedule::Mode::Constant) return schedule.target_value;
  require(schedule.target_value >= schedule.start_value,
          "lambda schedule: heat-up target must be >= start value");
  if (schedule.total_epochs <= 1) return schedule.target_value;
  const double t = schedule.start_value +
                   (schedule.target_value - schedule.start_value) * static_cast<double>(epoch) /
                       static_cast<double>(schedule.total_epochs - 1);
  return std::min(t, schedule.target_value);
}

}  // namespace hfp
