// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/graph.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace hfp {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Fc: return "fc";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Gap: return "gap";
    case LayerKind::Add: return "add";
  }
  return "?";
}

std::optional<LayerKind> layer_kind_from(const std::string& name) {
  if (name == "conv") return LayerKind::Conv;
  if (name == "fc") return LayerKind::Fc;
  if (name == "batchnorm") return LayerKind::BatchNorm;
  if (name == "relu") return LayerKind::Relu;
  if (name == "maxpool") return LayerKind::MaxPool;
  if (name == "gap") return LayerKind::Gap;
  if (name == "add") return LayerKind::Add;
  return std::nullopt;
}

const LayerSpec* NetworkGraph::find(int id) const {
  for (const auto& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

LayerSpec* NetworkGraph::find(int id) {
  for (auto& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

std::vector<int> NetworkGraph::consumers(int id) const {
  std::vector<int> out;
  for (const auto& l : layers) {
    for (int p : l.preds) {
      if (p == id) {
        out.push_back(l.id);
        break;
      }
    }
  }
  return out;
}

int NetworkGraph::output_layer() const {
  std::set<int> consumed;
  for (const auto& l : layers) {
    for (int p : l.preds) consumed.insert(p);
  }
  for (const auto& l : layers) {
    if (!consumed.count(l.id)) return l.id;
  }
  return -1;
}

std::string Diagnostics::joined() const {
  std::string s;
  for (size_t i = 0; i < issues.size(); ++i) {
    if (i) s += "; ";
    s += issues[i];
  }
  return s;
}

namespace {

struct ShapeInfo {
  int channels = 0;
  int h = 0, w = 0;
  bool flat = false;
};

std::string lstr(const LayerSpec& l) {
  return "layer " + std::to_string(l.id) + " (" + to_string(l.kind) + ")";
}

}  // namespace

Diagnostics validate(NetworkGraph& g) {
  Diagnostics d;
  auto issue = [&d](const std::string& s) { d.issues.push_back(s); };

  if (g.layers.empty()) {
    issue("graph has no layers");
    return d;
  }
  if (g.num_classes <= 0) issue("num_classes must be positive");
  if (g.input_channels <= 0 || g.input_height <= 0 || g.input_width <= 0) {
    issue("input shape must be positive, got " + std::to_string(g.input_channels) + "x" +
          std::to_string(g.input_height) + "x" + std::to_string(g.input_width));
  }

  std::map<int, size_t> index_of;
  for (size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (index_of.count(l.id)) {
      issue("duplicate layer id " + std::to_string(l.id));
      return d;
    }
    index_of[l.id] = i;
  }

  // Predecessors must already be declared: forward references would make the
  // ordered layer list cyclic or dangling.
  int inputs = 0;
  for (size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.preds.empty()) ++inputs;
    for (int p : l.preds) {
      auto it = index_of.find(p);
      if (it == index_of.end()) {
        issue(lstr(l) + ": dangling predecessor " + std::to_string(p));
      } else if (it->second >= i) {
        issue(lstr(l) + ": predecessor " + std::to_string(p) + " is not declared earlier (cycle)");
      }
    }
  }
  if (inputs != 1) issue("graph must have exactly one input layer, found " + std::to_string(inputs));
  if (!d.ok()) return d;

  int sinks = 0;
  {
    std::set<int> consumed;
    for (const auto& l : g.layers) {
      for (int p : l.preds) consumed.insert(p);
    }
    for (const auto& l : g.layers) {
      if (!consumed.count(l.id)) ++sinks;
    }
  }
  if (sinks != 1) issue("graph must have exactly one output layer, found " + std::to_string(sinks));

  // Shape inference, in declaration order.
  std::map<int, ShapeInfo> out_shape;
  for (auto& l : g.layers) {
    ShapeInfo in;
    if (l.preds.empty()) {
      in = {g.input_channels, g.input_height, g.input_width, false};
    } else {
      in = out_shape[l.preds[0]];
    }
    if (l.kind != LayerKind::Add && l.preds.size() > 1) {
      issue(lstr(l) + ": only add layers may have multiple predecessors");
      return d;
    }

    l.in_h = in.h;
    l.in_w = in.w;
    l.flat_in = in.flat;
    ShapeInfo out = in;

    switch (l.kind) {
      case LayerKind::Conv: {
        if (in.flat) {
          issue(lstr(l) + ": conv requires a spatial input");
          return d;
        }
        if (l.in_channels <= 0 || l.out_channels <= 0) {
          issue(lstr(l) + ": conv must have positive in/out channels");
          return d;
        }
        if (l.in_channels != in.channels) {
          issue(lstr(l) + ": in_channels " + std::to_string(l.in_channels) +
                " does not match predecessor channels " + std::to_string(in.channels));
          return d;
        }
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0) {
          issue(lstr(l) + ": invalid kernel/stride/padding");
          return d;
        }
        out.channels = l.out_channels;
        out.h = (in.h + 2 * l.padding - l.kernel) / l.stride + 1;
        out.w = (in.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (out.h < 1 || out.w < 1) {
          issue(lstr(l) + ": kernel does not fit " + std::to_string(in.h) + "x" + std::to_string(in.w));
          return d;
        }
        break;
      }
      case LayerKind::Fc: {
        if (l.in_channels <= 0 || l.out_channels <= 0) {
          issue(lstr(l) + ": fc must have positive in/out channels");
          return d;
        }
        const int features = in.flat ? in.channels : in.channels * in.h * in.w;
        if (l.in_channels != features) {
          issue(lstr(l) + ": in_channels " + std::to_string(l.in_channels) +
                " does not match incoming features " + std::to_string(features));
          return d;
        }
        out.channels = l.out_channels;
        out.h = out.w = 1;
        out.flat = true;
        break;
      }
      case LayerKind::BatchNorm: {
        if (l.out_channels != in.channels) {
          issue(lstr(l) + ": batchnorm channels " + std::to_string(l.out_channels) +
                " do not match predecessor channels " + std::to_string(in.channels));
          return d;
        }
        l.in_channels = in.channels;
        break;
      }
      case LayerKind::Relu: {
        l.in_channels = in.channels;
        l.out_channels = in.channels;
        break;
      }
      case LayerKind::MaxPool: {
        if (in.flat) {
          issue(lstr(l) + ": maxpool requires a spatial input");
          return d;
        }
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0 || l.padding >= l.kernel) {
          issue(lstr(l) + ": invalid kernel/stride/padding");
          return d;
        }
        l.in_channels = in.channels;
        l.out_channels = in.channels;
        out.h = (in.h + 2 * l.padding - l.kernel) / l.stride + 1;
        out.w = (in.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (out.h < 1 || out.w < 1) {
          issue(lstr(l) + ": window does not fit " + std::to_string(in.h) + "x" + std::to_string(in.w));
          return d;
        }
        break;
      }
      case LayerKind::Gap: {
        if (in.flat) {
          issue(lstr(l) + ": gap requires a spatial input");
          return d;
        }
        l.in_channels = in.channels;
        l.out_channels = in.channels;
        out.h = out.w = 1;
        out.flat = true;
        break;
      }
      case LayerKind::Add: {
        if (l.preds.size() < 2) {
          issue(lstr(l) + ": add needs at least 2 predecessors");
          return d;
        }
        for (size_t j = 1; j < l.preds.size(); ++j) {
          const ShapeInfo& o = out_shape[l.preds[j]];
          if (o.channels != in.channels || o.h != in.h || o.w != in.w || o.flat != in.flat) {
            issue(lstr(l) + ": channel/shape mismatch between predecessors " +
                  std::to_string(l.preds[0]) + " (" + std::to_string(in.channels) + "ch) and " +
                  std::to_string(l.preds[j]) + " (" + std::to_string(o.channels) + "ch)");
            return d;
          }
        }
        l.in_channels = in.channels;
        l.out_channels = in.channels;
        break;
      }
    }
    l.out_h = out.h;
    l.out_w = out.w;
    l.flat_out = out.flat;
    out_shape[l.id] = out;
  }

  // Output must be logits [N, num_classes].
  const int out_id = g.output_layer();
  if (out_id >= 0) {
    const ShapeInfo& o = out_shape[out_id];
    if (!o.flat || o.channels != g.num_classes) {
      issue("output layer " + std::to_string(out_id) + " must produce flat [N," +
            std::to_string(g.num_classes) + "] logits");
    }
  }

  // Shortcut groups: batch-norm members only, unique membership, equal widths.
  std::set<int> seen_members;
  for (size_t gi = 0; gi < g.shortcut_groups.size(); ++gi) {
    const auto& grp = g.shortcut_groups[gi];
    if (grp.size() < 2) issue("shortcut group " + std::to_string(gi) + " needs >= 2 members");
    int width = -1;
    for (int id : grp) {
      const LayerSpec* m = g.find(id);
      if (!m) {
        issue("shortcut group " + std::to_string(gi) + " references unknown layer " + std::to_string(id));
        continue;
      }
      if (m->kind != LayerKind::BatchNorm) {
        issue("shortcut group " + std::to_string(gi) + " member " + std::to_string(id) +
              " is not a batchnorm layer");
        continue;
      }
      if (seen_members.count(id)) {
        issue("batchnorm layer " + std::to_string(id) + " appears in more than one shortcut group");
      }
      seen_members.insert(id);
      if (width < 0) {
        width = m->out_channels;
      } else if (width != m->out_channels) {
        issue("shortcut group " + std::to_string(gi) + " members have unequal channel counts");
      }
    }
  }

  return d;
}

void validate_or_throw(NetworkGraph& g) {
  Diagnostics d = validate(g);
  require(d.ok(), "invalid graph: ", d.joined());
}

BaseComplexity base_complexity(const NetworkGraph& g) {
  BaseComplexity bc;
  bc.per_layer_params.assign(g.layers.size(), 0);
  bc.per_layer_mults.assign(g.layers.size(), 0);
  for (size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.kind == LayerKind::Conv) {
      const int64_t p = static_cast<int64_t>(l.in_channels) * l.out_channels * l.kernel * l.kernel;
      bc.per_layer_params[i] = p;
      bc.per_layer_mults[i] = p * l.out_h * l.out_w;
    } else if (l.kind == LayerKind::Fc) {
      const int64_t p = static_cast<int64_t>(l.in_channels) * l.out_channels;
      bc.per_layer_params[i] = p;
      bc.per_layer_mults[i] = p;
    }
    bc.total_params += bc.per_layer_params[i];
    bc.total_mults += bc.per_layer_mults[i];
  }
  return bc;
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

std::string serialize(const NetworkGraph& g) {
  std::ostringstream os;
  os << "# hfp network graph\n";
  os << "input channels=" << g.input_channels << " height=" << g.input_height
     << " width=" << g.input_width << "\n";
  os << "classes " << g.num_classes << "\n";
  for (const auto& l : g.layers) {
    os << "layer " << l.id << " kind=" << to_string(l.kind) << " in=" << l.in_channels
       << " out=" << l.out_channels << " k=" << l.kernel << " stride=" << l.stride
       << " pad=" << l.padding << " pred=";
    for (size_t i = 0; i < l.preds.size(); ++i) {
      if (i) os << ",";
      os << l.preds[i];
    }
    os << "\n";
  }
  for (const auto& grp : g.shortcut_groups) {
    os << "group ";
    for (size_t i = 0; i < grp.size(); ++i) {
      if (i) os << ",";
      os << grp[i];
    }
    os << "\n";
  }
  return os.str();
}

namespace {

[[noreturn]] void parse_fail(int line, const std::string& what) {
  fail("graph parse error at line ", line, ": ", what);
}

int parse_int(const std::string& s, int line, const std::string& field) {
  try {
    size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) parse_fail(line, "bad integer for '" + field + "': " + s);
    return v;
  } catch (const std::exception&) {
    parse_fail(line, "bad integer for '" + field + "': " + s);
  }
}

std::vector<int> parse_int_list(const std::string& s, int line, const std::string& field) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(item, line, field));
  return out;
}

}  // namespace

NetworkGraph deserialize(const std::string& text) {
  NetworkGraph g;
  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  bool saw_input = false, saw_classes = false;
  while (std::getline(is, raw)) {
    ++line_no;
    const size_t hash = raw.find('#');
    std::string line = hash == std::string::npos ? raw : raw.substr(0, hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;

    if (head == "input") {
      std::string tok;
      while (ls >> tok) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos) parse_fail(line_no, "expected key=value, got '" + tok + "'");
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "channels") g.input_channels = parse_int(val, line_no, key);
        else if (key == "height") g.input_height = parse_int(val, line_no, key);
        else if (key == "width") g.input_width = parse_int(val, line_no, key);
        else parse_fail(line_no, "unknown input field '" + key + "'");
      }
      saw_input = true;
    } else if (head == "classes") {
      std::string val;
      if (!(ls >> val)) parse_fail(line_no, "missing class count");
      g.num_classes = parse_int(val, line_no, "classes");
      saw_classes = true;
    } else if (head == "layer") {
      LayerSpec l;
      std::string id_tok;
      if (!(ls >> id_tok)) parse_fail(line_no, "missing layer id");
      l.id = parse_int(id_tok, line_no, "id");
      bool saw_kind = false, saw_pred = false;
      std::string tok;
      while (ls >> tok) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos) parse_fail(line_no, "expected key=value, got '" + tok + "'");
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "kind") {
          auto k = layer_kind_from(val);
          if (!k) parse_fail(line_no, "unknown layer kind '" + val + "'");
          l.kind = *k;
          saw_kind = true;
        } else if (key == "in") {
          l.in_channels = parse_int(val, line_no, key);
        } else if (key == "out") {
          l.out_channels = parse_int(val, line_no, key);
        } else if (key == "k") {
          l.kernel = parse_int(val, line_no, key);
        } else if (key == "stride") {
          l.stride = parse_int(val, line_no, key);
        } else if (key == "pad") {
          l.padding = parse_int(val, line_no, key);
        } else if (key == "pred") {
          l.preds = parse_int_list(val, line_no, key);
          saw_pred = true;
        } else {
          parse_fail(line_no, "unknown layer field '" + key + "'");
        }
      }
      if (!saw_kind) parse_fail(line_no, "missing required field 'kind'");
      if (!saw_pred) parse_fail(line_no, "missing required field 'pred'");
      g.layers.push_back(l);
    } else if (head == "group") {
      std::string val;
      if (!(ls >> val)) parse_fail(line_no, "missing group member list");
      g.shortcut_groups.push_back(parse_int_list(val, line_no, "group"));
    } else {
      parse_fail(line_no, "unknown record '" + head + "'");
    }
  }
  if (!saw_input) fail("graph parse error: missing 'input' record");
  if (!saw_classes) fail("graph parse error: missing 'classes' record");
  validate_or_throw(g);
  return g;
}

// ---------------------------------------------------------------------------
// Builtin architectures
// ---------------------------------------------------------------------------

namespace {

class GraphBuilder {
public:
  explicit GraphBuilder(int classes, int c, int h, int w) {
    g_.num_classes = classes;
    g_.input_channels = c;
    g_.input_height = h;
    g_.input_width = w;
  }

  int conv(int in, int out, int k, int stride, int pad, std::vector<int> preds) {
    LayerSpec l;
    l.id = next_++;
    l.kind = LayerKind::Conv;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = k;
    l.stride = stride;
    l.padding = pad;
    l.preds = std::move(preds);
    g_.layers.push_back(l);
    return l.id;
  }

  int fc(int in, int out, int pred) {
    LayerSpec l;
    l.id = next_++;
    l.kind = LayerKind::Fc;
    l.in_channels = in;
    l.out_channels = out;
    l.preds = {pred};
    g_.layers.push_back(l);
    return l.id;
  }

  int bn(int channels, int pred) {
    LayerSpec l;
    l.id = next_++;
    l.kind = LayerKind::BatchNorm;
    l.in_channels = channels;
    l.out_channels = channels;
    l.preds = {pred};
    g_.layers.push_back(l);
    return l.id;
  }

  int simple(LayerKind kind, int pred) {
    LayerSpec l;
    l.id = next_++;
    l.kind = kind;
    l.preds = {pred};
    g_.layers.push_back(l);
    return l.id;
  }

  int maxpool(int k, int stride, int pred) {
    LayerSpec l;
    l.id = next_++;
    l.kind = LayerKind::MaxPool;
    l.kernel = k;
    l.stride = stride;
    l.preds = {pred};
    g_.layers.push_back(l);
    return l.id;
  }

  int add(std::vector<int> preds) {
    LayerSpec l;
    l.id = next_++;
    l.kind = LayerKind::Add;
    l.preds = std::move(preds);
    g_.layers.push_back(l);
    return l.id;
  }

  void group(std::vector<int> members) { g_.shortcut_groups.push_back(std::move(members)); }

  NetworkGraph take() {
    validate_or_throw(g_);
    return std::move(g_);
  }

private:
  NetworkGraph g_;
  int next_ = 0;
};

NetworkGraph make_tinyvgg(int classes, int c, int h, int w) {
  // Five conv blocks with two poolings, then the flattened maps feed a wide
  // fc layer that holds roughly half of all parameters, VGG-style.
  GraphBuilder b(classes, c, h, w);
  auto block = [&b](int in, int out, int pred) {
    const int cv = b.conv(in, out, 3, 1, 1, pred < 0 ? std::vector<int>{} : std::vector<int>{pred});
    const int n = b.bn(out, cv);
    return b.simple(LayerKind::Relu, n);
  };
  int x = block(c, 16, -1);
  x = block(16, 16, x);
  x = b.maxpool(2, 2, x);
  x = block(16, 32, x);
  x = block(32, 32, x);
  x = b.maxpool(2, 2, x);
  x = block(32, 32, x);
  const int flat = 32 * (h / 4) * (w / 4);
  x = b.fc(flat, 48, x);
  x = b.bn(48, x);
  x = b.simple(LayerKind::Relu, x);
  x = b.fc(48, classes, x);
  return b.take();
}

NetworkGraph make_tinyresnet(int classes, int c, int h, int w) {
  GraphBuilder b(classes, c, h, w);
  // Stem.
  int x = b.conv(c, 8, 3, 1, 1, {});
  x = b.bn(8, x);
  x = b.simple(LayerKind::Relu, x);
  // Residual block: main branch conv-bn-relu-conv-bn, projection branch
  // conv1x1-bn; both branch-ending BNs form one shortcut group.
  auto block = [&b](int in, int out, int stride, int pred) {
    const int c1 = b.conv(in, out, 3, stride, 1, {pred});
    const int n1 = b.bn(out, c1);
    const int r1 = b.simple(LayerKind::Relu, n1);
    const int c2 = b.conv(out, out, 3, 1, 1, {r1});
    const int n2 = b.bn(out, c2);
    const int cp = b.conv(in, out, 1, stride, 0, {pred});
    const int np = b.bn(out, cp);
    const int s = b.add({n2, np});
    b.group({n2, np});
    return b.simple(LayerKind::Relu, s);
  };
  x = block(8, 8, 1, x);
  x = block(8, 16, 2, x);
  x = b.simple(LayerKind::Gap, x);
  x = b.fc(16, classes, x);
  return b.take();
}

}  // namespace

NetworkGraph builtin_architecture(const std::string& name, int num_classes, int input_channels,
                                  int input_height, int input_width) {
  if (name == "tinyvgg") return make_tinyvgg(num_classes, input_channels, input_height, input_width);
  if (name == "tinyresnet") {
    return make_tinyresnet(num_classes, input_channels, input_height, input_width);
  }
  fail("unknown architecture '", name, "' (expected tinyvgg or tinyresnet)");
}

}  // namespace hfp
