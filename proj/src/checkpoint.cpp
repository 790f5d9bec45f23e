// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hfp/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

namespace hfp {

namespace {

struct TensorRef {
  std::string name;
  const std::vector<float>* data;
};

std::vector<TensorRef> tensor_table(const Model& m) {
  std::vector<TensorRef> refs;
  for (const auto& l : m.graph.layers) {
    const std::string prefix = "layer" + std::to_string(l.id);
    auto wit = m.weighted.find(l.id);
    if (wit != m.weighted.end()) {
      refs.push_back({prefix + ".weight", &wit->second.weight.value});
      refs.push_back({prefix + ".bias", &wit->second.bias.value});
    }
    auto nit = m.norms.find(l.id);
    if (nit != m.norms.end()) {
      refs.push_back({prefix + ".gamma", &nit->second.gamma.value});
      refs.push_back({prefix + ".beta", &nit->second.beta.value});
      refs.push_back({prefix + ".running_mean", &nit->second.running_mean});
      refs.push_back({prefix + ".running_var", &nit->second.running_var});
    }
  }
  return refs;
}

std::string fmt_float(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream g(dir + "/graph.txt", std::ios::binary);
    require(g.good(), "checkpoint: cannot write ", dir, "/graph.txt");
    g << serialize(model.graph);
  }

  const std::vector<TensorRef> refs = tensor_table(model);
  std::ostringstream manifest;
  manifest << "format hfp-checkpoint-1\n";
  double eps = 1e-5, mom = 0.1;
  if (!model.norms.empty()) {
    eps = model.norms.begin()->second.epsilon;
    mom = model.norms.begin()->second.momentum;
  }
  manifest << "bn_epsilon " << fmt_float(eps) << "\n";
  manifest << "bn_momentum " << fmt_float(mom) << "\n";

  std::ofstream blob(dir + "/weights.bin", std::ios::binary);
  require(blob.good(), "checkpoint: cannot write ", dir, "/weights.bin");
  int64_t offset = 0;
  for (const auto& r : refs) {
    blob.write(reinterpret_cast<const char*>(r.data->data()),
               static_cast<std::streamsize>(r.data->size() * sizeof(float)));
    manifest << "tensor " << r.name << " offset=" << offset << " count=" << r.data->size() << "\n";
    offset += static_cast<int64_t>(r.data->size());
  }
  require(blob.good(), "checkpoint: short write to ", dir, "/weights.bin");
  blob.close();

  std::ofstream mf(dir + "/model.manifest", std::ios::binary);
  require(mf.good(), "checkpoint: cannot write ", dir, "/model.manifest");
  mf << manifest.str();
}

Model load_checkpoint(const std::string& dir) {
  std::ifstream g(dir + "/graph.txt", std::ios::binary);
  require(g.good(), "checkpoint: cannot read ", dir, "/graph.txt");
  std::stringstream gs;
  gs << g.rdbuf();
  NetworkGraph graph = deserialize(gs.str());

  Model m;
  m.graph = std::move(graph);
  for (const auto& l : m.graph.layers) {
    const std::string prefix = "layer" + std::to_string(l.id);
    if (l.kind == LayerKind::Conv) {
      WeightedLayer wl;
      wl.weight = Param(prefix + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel});
      wl.bias = Param(prefix + ".bias", {l.out_channels});
      m.weighted.emplace(l.id, std::move(wl));
    } else if (l.kind == LayerKind::Fc) {
      WeightedLayer wl;
      wl.weight = Param(prefix + ".weight", {l.out_channels, l.in_channels});
      wl.bias = Param(prefix + ".bias", {l.out_channels});
      m.weighted.emplace(l.id, std::move(wl));
    } else if (l.kind == LayerKind::BatchNorm) {
      m.norms.emplace(l.id, BatchNormState(prefix, l.out_channels));
    }
  }

  std::ifstream mf(dir + "/model.manifest");
  require(mf.good(), "checkpoint: cannot read ", dir, "/model.manifest");
  double eps = 1e-5, mom = 0.1;
  struct Entry {
    std::string name;
    int64_t offset = 0;
    int64_t count = 0;
  };
  std::vector<Entry> entries;
  std::string line;
  while (std::getline(mf, line)) {
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    if (head == "format") {
      std::string v;
      ls >> v;
      require(v == "hfp-checkpoint-1", "checkpoint: unsupported format '", v, "'");
    } else if (head == "bn_epsilon") {
      ls >> eps;
    } else if (head == "bn_momentum") {
      ls >> mom;
    } else if (head == "tensor") {
      Entry e;
      std::string tok;
      ls >> e.name;
      while (ls >> tok) {
        if (tok.rfind("offset=", 0) == 0) e.offset = std::stoll(tok.substr(7));
        else if (tok.rfind("count=", 0) == 0) e.count = std::stoll(tok.substr(6));
        else fail("checkpoint: bad manifest token '", tok, "'");
      }
      entries.push_back(e);
    } else {
      fail("checkpoint: unknown manifest record '", head, "'");
    }
  }
  for (auto& [id, st] : m.norms) {
    st.epsilon = static_cast<float>(eps);
    st.momentum = static_cast<float>(mom);
  }

  std::ifstream blob(dir + "/weights.bin", std::ios::binary);
  require(blob.good(), "checkpoint: cannot read ", dir, "/weights.bin");
  auto fill = [&](const std::string& name, std::vector<float>& dst) {
    for (const auto& e : entries) {
      if (e.name != name) continue;
      require(e.count == static_cast<int64_t>(dst.size()), "checkpoint: tensor ", name,
              " has count ", e.count, " but the graph expects ", dst.size());
      blob.seekg(e.offset * static_cast<int64_t>(sizeof(float)));
      blob.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.size() * sizeof(float)));
      require(blob.good(), "checkpoint: short read for tensor ", name);
      return;
    }
    fail("checkpoint: tensor ", name, " missing from manifest");
  };
  for (const auto& l : m.graph.layers) {
    const std::string prefix = "layer" + std::to_string(l.id);
    auto wit = m.weighted.find(l.id);
    if (wit != m.weighted.end()) {
      fill(prefix + ".weight", wit->second.weight.value);
      fill(prefix + ".bias", wit->second.bias.value);
    }
    auto nit = m.norms.find(l.id);
    if (nit != m.norms.end()) {
      fill(prefix + ".gamma", nit->second.gamma.value);
      fill(prefix + ".beta", nit->second.beta.value);
      fill(prefix + ".running_mean", nit->second.running_mean);
      fill(prefix + ".running_var", nit->second.running_var);
    }
  }
  return m;
}

}  // namespace hfp
