// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Graph validation, complexity bookkeeping, serialization round-trips and
// the builtin architectures.

#include <doctest.h>

#include <random>

#include "hfp/graph.hpp"
#include "support/oracles.hpp"

using namespace hfp;
namespace oracle = hfp::testing;

namespace {

LayerSpec make_layer(int id, LayerKind kind, int in, int out, int k, int stride, int pad,
                     std::vector<int> preds) {
  LayerSpec l;
  l.id = id;
  l.kind = kind;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = stride;
  l.padding = pad;
  l.preds = std::move(preds);
  return l;
}

NetworkGraph small_chain() {
  NetworkGraph g;
  g.num_classes = 10;
  g.input_channels = 3;
  g.input_height = g.input_width = 8;
  g.layers.push_back(make_layer(0, LayerKind::Conv, 3, 4, 3, 1, 1, {}));
  g.layers.push_back(make_layer(1, LayerKind::BatchNorm, 4, 4, 0, 1, 0, {0}));
  g.layers.push_back(make_layer(2, LayerKind::Relu, 0, 0, 0, 1, 0, {1}));
  g.layers.push_back(make_layer(3, LayerKind::Gap, 0, 0, 0, 1, 0, {2}));
  g.layers.push_back(make_layer(4, LayerKind::Fc, 4, 10, 0, 1, 0, {3}));
  return g;
}

}  // namespace

TEST_SUITE("graph") {
  TEST_CASE("a linear chain validates and infers shapes") {
    NetworkGraph g = small_chain();
    const Diagnostics d = validate(g);
    CHECK(d.ok());
    CHECK(g.layers[0].out_h == 8);
    CHECK(g.layers[3].flat_out);
    CHECK(g.layers[4].flat_in);
  }

  TEST_CASE("add junction with mismatched channels is diagnosed") {
    NetworkGraph g;
    g.num_classes = 4;
    g.input_channels = 3;
    g.input_height = g.input_width = 8;
    g.layers.push_back(make_layer(0, LayerKind::Conv, 3, 4, 3, 1, 1, {}));
    g.layers.push_back(make_layer(1, LayerKind::Conv, 4, 4, 3, 1, 1, {0}));
    g.layers.push_back(make_layer(2, LayerKind::Conv, 4, 8, 3, 1, 1, {0}));
    g.layers.push_back(make_layer(3, LayerKind::Add, 0, 0, 0, 1, 0, {1, 2}));
    g.layers.push_back(make_layer(4, LayerKind::Gap, 0, 0, 0, 1, 0, {3}));
    g.layers.push_back(make_layer(5, LayerKind::Fc, 4, 4, 0, 1, 0, {4}));
    const Diagnostics d = validate(g);
    REQUIRE(!d.ok());
    CHECK(d.joined().find("mismatch") != std::string::npos);
  }

  TEST_CASE("a batchnorm in two shortcut groups is diagnosed") {
    NetworkGraph g = small_chain();
    g.shortcut_groups.push_back({1, 1});
    Diagnostics d = validate(g);
    REQUIRE(!d.ok());
    CHECK(d.joined().find("more than one shortcut group") != std::string::npos);
  }

  TEST_CASE("dangling and forward references are diagnosed") {
    NetworkGraph g = small_chain();
    g.layers[1].preds = {99};
    CHECK(validate(g).joined().find("dangling") != std::string::npos);
    g = small_chain();
    g.layers[1].preds = {4};
    CHECK(validate(g).joined().find("cycle") != std::string::npos);
  }

  TEST_CASE("base complexity of conv and fc layers") {
    NetworkGraph g = small_chain();
    validate_or_throw(g);
    const BaseComplexity bc = base_complexity(g);
    CHECK(bc.per_layer_params[0] == 108);  // 3*4*9
    CHECK(bc.per_layer_mults[0] == 108 * 64);
    CHECK(bc.per_layer_params[4] == 40);
    CHECK(bc.per_layer_mults[4] == 40);
    CHECK(bc.total_params == 148);

    // fc 2 -> 10 contributes its weight-matrix size to both counts
    NetworkGraph g2;
    g2.num_classes = 10;
    g2.input_channels = 2;
    g2.input_height = g2.input_width = 1;
    g2.layers.push_back(make_layer(0, LayerKind::Gap, 0, 0, 0, 1, 0, {}));
    g2.layers.push_back(make_layer(1, LayerKind::Fc, 2, 10, 0, 1, 0, {0}));
    validate_or_throw(g2);
    const BaseComplexity bc2 = base_complexity(g2);
    CHECK(bc2.per_layer_params[1] == 20);
    CHECK(bc2.per_layer_mults[1] == 20);
  }

  TEST_CASE("conv mult count equals the naive oracle's multiply count") {
    NetworkGraph g = small_chain();
    validate_or_throw(g);
    const BaseComplexity bc = base_complexity(g);
    const std::vector<uint8_t> all_in(3, 1), all_out(4, 1);
    CHECK(bc.per_layer_mults[0] == oracle::count_conv_mults(8, 8, 3, all_in, all_out));
    CHECK(bc.per_layer_mults[0] == 6912);
  }

  TEST_CASE("serialization round-trips the builtin graphs") {
    for (const char* name : {"tinyvgg", "tinyresnet"}) {
      NetworkGraph g = builtin_architecture(name, 10, 3, 16, 16);
      NetworkGraph back = deserialize(serialize(g));
      REQUIRE(back.layers.size() == g.layers.size());
      CHECK(back.num_classes == g.num_classes);
      CHECK(back.input_channels == g.input_channels);
      CHECK(back.input_height == g.input_height);
      CHECK(back.input_width == g.input_width);
      CHECK(back.shortcut_groups == g.shortcut_groups);
      for (size_t i = 0; i < g.layers.size(); ++i) {
        CHECK(back.layers[i].id == g.layers[i].id);
        CHECK(back.layers[i].kind == g.layers[i].kind);
        CHECK(back.layers[i].in_channels == g.layers[i].in_channels);
        CHECK(back.layers[i].out_channels == g.layers[i].out_channels);
        CHECK(back.layers[i].kernel == g.layers[i].kernel);
        CHECK(back.layers[i].stride == g.layers[i].stride);
        CHECK(back.layers[i].padding == g.layers[i].padding);
        CHECK(back.layers[i].preds == g.layers[i].preds);
      }
      // serialized text is stable through a round-trip
      CHECK(serialize(back) == serialize(g));
    }
  }

  TEST_CASE("random graphs round-trip bit-exactly") {
    std::mt19937 rng(99);
    for (int i = 0; i < 25; ++i) {
      NetworkGraph g = oracle::random_graph(rng);
      CHECK(serialize(deserialize(serialize(g))) == serialize(g));
    }
  }

  TEST_CASE("parse errors name the problem") {
    CHECK_THROWS_WITH_AS(deserialize("input channels=3 height=8 width=8\nclasses 4\n"
                                     "layer 0 in=3 out=4 k=3 stride=1 pad=1 pred=\n"),
                         doctest::Contains("missing required field 'kind'"), Error);
    CHECK_THROWS_WITH_AS(deserialize("input channels=3 height=8 width=8\nclasses 4\n"
                                     "layer 0 kind=wavelet in=3 out=4 k=3 stride=1 pad=1 pred=\n"),
                         doctest::Contains("unknown layer kind"), Error);
    CHECK_THROWS_WITH_AS(deserialize("classes 4\n"), doctest::Contains("missing 'input'"), Error);
  }

  TEST_CASE("tinyvgg structure") {
    NetworkGraph g = builtin_architecture("tinyvgg", 10, 3, 16, 16);
    int fc = 0, conv = 0;
    for (const auto& l : g.layers) {
      if (l.kind == LayerKind::Fc) ++fc;
      if (l.kind == LayerKind::Conv) ++conv;
    }
    CHECK(fc == 2);
    CHECK(conv >= 4);
    CHECK(conv <= 6);
    // desk-scale budget
    const BaseComplexity bc = base_complexity(g);
    CHECK(bc.total_params >= 20000);
    CHECK(bc.total_params <= 60000);
  }

  TEST_CASE("tinyresnet has a shortcut group with at least two members") {
    NetworkGraph g = builtin_architecture("tinyresnet", 10, 3, 16, 16);
    REQUIRE(!g.shortcut_groups.empty());
    for (const auto& grp : g.shortcut_groups) CHECK(grp.size() >= 2);
    CHECK_THROWS_AS(builtin_architecture("meganet", 10, 3, 16, 16), Error);
  }

  TEST_CASE("tinyvgg base complexity matches hand enumeration") {
    NetworkGraph g = builtin_architecture("tinyvgg", 10, 3, 16, 16);
    // enumerate weight entries layer by layer from the layer dimensions
    int64_t params = 0, mults = 0;
    for (const auto& l : g.layers) {
      if (l.kind == LayerKind::Conv) {
        int64_t p = 0;
        for (int co = 0; co < l.out_channels; ++co) {
          for (int ci = 0; ci < l.in_channels; ++ci) {
            for (int t = 0; t < l.kernel * l.kernel; ++t) ++p;
          }
        }
        params += p;
        mults += p * l.out_h * l.out_w;
      } else if (l.kind == LayerKind::Fc) {
        params += static_cast<int64_t>(l.in_channels) * l.out_channels;
        mults += static_cast<int64_t>(l.in_channels) * l.out_channels;
      }
    }
    const BaseComplexity bc = base_complexity(g);
    CHECK(bc.total_params == params);
    CHECK(bc.total_mults == mults);
  }
}
