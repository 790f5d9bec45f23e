// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/model.hpp"

#include <cmath>
#include <random>

#include "hfp/data.hpp"

namespace hfp {

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out;
  for (const auto& l : graph.layers) {
    auto wit = weighted.find(l.id);
    if (wit != weighted.end()) {
      out.push_back(&wit->second.weight);
      out.push_back(&wit->second.bias);
    }
    auto nit = norms.find(l.id);
    if (nit != norms.end()) {
      out.push_back(&nit->second.gamma);
      out.push_back(&nit->second.beta);
    }
  }
  return out;
}

GammaMap Model::gammas() const {
  GammaMap out;
  for (const auto& [id, state] : norms) {
    std::vector<double> g(state.gamma.value.begin(), state.gamma.value.end());
    out[id] = std::move(g);
  }
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& [id, w] : weighted) n += w.weight.size() + w.bias.size();
  for (const auto& [id, s] : norms) n += s.gamma.size() + s.beta.size();
  return n;
}

Model init_model(const NetworkGraph& graph, uint64_t seed) {
  Model m;
  m.graph = graph;
  validate_or_throw(m.graph);
  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  for (const auto& l : m.graph.layers) {
    const std::string prefix = "layer" + std::to_string(l.id);
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Fc) {
      WeightedLayer wl;
      if (l.kind == LayerKind::Conv) {
        wl.weight = Param(prefix + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel});
      } else {
        wl.weight = Param(prefix + ".weight", {l.out_channels, l.in_channels});
      }
      wl.bias = Param(prefix + ".bias", {l.out_channels});
      const int fan_in =
          l.kind == LayerKind::Conv ? l.in_channels * l.kernel * l.kernel : l.in_channels;
      const float bound = std::sqrt(1.0f / static_cast<float>(fan_in));
      std::uniform_real_distribution<float> dist(-bound, bound);
      for (float& v : wl.weight.value) v = dist(rng);
      m.weighted.emplace(l.id, std::move(wl));
    } else if (l.kind == LayerKind::BatchNorm) {
      m.norms.emplace(l.id, BatchNormState(prefix, l.out_channels));
    }
  }
  return m;
}

Value forward(Model& m, Tape& tape, const Tensor& images, BnMode mode) {
  require(images.shape.size() == 4, "forward: images must be [N,C,H,W], got ",
          shape_str(images.shape));
  require(images.shape[1] == m.graph.input_channels && images.shape[2] == m.graph.input_height &&
              images.shape[3] == m.graph.input_width,
          "forward: image shape ", shape_str(images.shape), " does not match graph input ",
          m.graph.input_channels, "x", m.graph.input_height, "x", m.graph.input_width);

  const Value input = tape.input(images);
  std::map<int, Value> out;

  for (const auto& l : m.graph.layers) {
    Value x = l.preds.empty() ? input : out.at(l.preds[0]);
    Value y{};
    switch (l.kind) {
      case LayerKind::Conv: {
        WeightedLayer& wl = m.weighted.at(l.id);
        y = conv2d(x, tape.param(wl.weight), tape.param(wl.bias), l.stride, l.padding);
        break;
      }
      case LayerKind::Fc: {
        WeightedLayer& wl = m.weighted.at(l.id);
        if (tape.shape(x).size() != 2) {
          const Shape& s = tape.shape(x);
          y = reshape(x, Shape{s[0], l.in_channels});
        } else {
          y = x;
        }
        y = linear(y, tape.param(wl.weight), tape.param(wl.bias));
        break;
      }
      case LayerKind::BatchNorm: {
        BatchNormState& st = m.norms.at(l.id);
        y = batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, mode);
        break;
      }
      case LayerKind::Relu:
        y = relu(x);
        break;
      case LayerKind::MaxPool:
        y = max_pool2d(x, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::Gap:
        y = global_avg_pool(x);
        break;
      case LayerKind::Add: {
        std::vector<Value> ins;
        for (int p : l.preds) ins.push_back(out.at(p));
        y = add(ins);
        break;
      }
    }
    out[l.id] = y;
  }
  return out.at(m.graph.output_layer());
}

std::vector<float> predict_logits(Model& m, const Tensor& images, BnMode mode) {
  Tape tape;
  const Value logits = forward(m, tape, images, mode);
  return tape.value(logits);
}

EvalResult evaluate(Model& m, const Dataset& data, int batch_size) {
  require(batch_size >= 1, "evaluate: batch size must be >= 1");
  const int n = data.size();
  require(n > 0, "evaluate: empty dataset");
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  double loss_sum = 0.0;
  int64_t correct = 0;
  Tensor batch;
  std::vector<int> labels;
  for (int first = 0; first < n; first += batch_size) {
    const int count = std::min(batch_size, n - first);
    gather_batch(data, order, static_cast<size_t>(first), static_cast<size_t>(count), batch, labels);
    Tape tape;
    const Value logits = forward(m, tape, batch, BnMode::Inference);
    const std::vector<float>& lv = tape.value(logits);
    const int k = tape.shape(logits)[1];
    for (int i = 0; i < count; ++i) {
      const float* row = lv.data() + static_cast<int64_t>(i) * k;
      int best = 0;
      double mx = row[0];
      for (int j = 1; j < k; ++j) {
        if (row[j] > mx) {
          mx = row[j];
          best = j;
        }
      }
      if (best == labels[static_cast<size_t>(i)]) ++correct;
      // log-sum-exp for the mean cross-entropy
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      loss_sum += std::log(z) + mx - static_cast<double>(row[labels[static_cast<size_t>(i)]]);
    }
  }
  EvalResult r;
  r.mean_loss = loss_sum / static_cast<double>(n);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

}  // namespace hfp
