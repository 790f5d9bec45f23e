// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor, autodiff and optimizer tests: worked layer examples, naive-loop
// oracles, finite-difference gradient checks and the Nesterov recursion.

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "hfp/autodiff.hpp"
#include "hfp/optimizer.hpp"
#include "support/oracles.hpp"

using namespace hfp;
namespace oracle = hfp::testing;

namespace {

template <typename T>
std::vector<T> random_vec(size_t n, std::mt19937& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0f, 2.0f}), Error);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({0, 3}), Error);
  }

  TEST_CASE("conv2d 1x1 is a scalar product") {
    Tape tape;
    const float xv[] = {2.0f};
    const float wv[] = {3.0f};
    Value x = tape.input({1, 1, 1, 1}, xv);
    Value w = tape.input({1, 1, 1, 1}, wv);
    Value y = conv2d(x, w, 1, 0);
    CHECK(tape.value(y)[0] == doctest::Approx(6.0f));
  }

  TEST_CASE("conv2d zero input passes only bias") {
    Tape tape;
    std::vector<float> xv(2 * 3 * 4 * 4, 0.0f);
    std::vector<float> wv(5 * 3 * 3 * 3, 0.7f);
    const float bv[] = {0.7f, 0.7f, 0.7f, 0.7f, 0.7f};
    Value x = tape.input({2, 3, 4, 4}, xv.data());
    Value w = tape.input({5, 3, 3, 3}, wv.data());
    Value b = tape.input({5}, bv);
    Value y = conv2d(x, w, b, 1, 1);
    for (float v : tape.value(y)) CHECK(v == doctest::Approx(0.7f));
  }

  TEST_CASE("conv2d matches the six-nested-loop oracle") {
    std::mt19937 rng(7);
    const auto xv = random_vec<float>(1 * 3 * 8 * 8, rng);
    const auto wv = random_vec<float>(4 * 3 * 3 * 3, rng);
    const auto bv = random_vec<float>(4, rng);
    Tape tape;
    Value x = tape.input({1, 3, 8, 8}, xv.data());
    Value w = tape.input({4, 3, 3, 3}, wv.data());
    Value b = tape.input({4}, bv.data());
    Value y = conv2d(x, w, b, 1, 1);
    const auto expect = oracle::naive_conv2d(xv, 1, 3, 8, 8, wv, 4, 3, bv.data(), 1, 1);
    REQUIRE(tape.value(y).size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(tape.value(y)[i] - expect[i]) <= 1e-5f);
    }
  }

  TEST_CASE("conv2d strided against the oracle") {
    std::mt19937 rng(11);
    const auto xv = random_vec<float>(2 * 2 * 9 * 9, rng);
    const auto wv = random_vec<float>(3 * 2 * 3 * 3, rng);
    Tape tape;
    Value x = tape.input({2, 2, 9, 9}, xv.data());
    Value w = tape.input({3, 2, 3, 3}, wv.data());
    Value y = conv2d(x, w, 2, 1);
    const auto expect = oracle::naive_conv2d(xv, 2, 2, 9, 9, wv, 3, 3,
                                             static_cast<const float*>(nullptr), 2, 1);
    REQUIRE(tape.value(y).size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(tape.value(y)[i] - expect[i]) <= 1e-5f);
    }
  }

  TEST_CASE("conv2d shape errors name the dimensions") {
    Tape tape;
    std::vector<float> xv(1 * 2 * 4 * 4, 0.0f);
    std::vector<float> wv(4 * 3 * 3 * 3, 0.0f);
    Value x = tape.input({1, 2, 4, 4}, xv.data());
    Value w = tape.input({4, 3, 3, 3}, wv.data());
    CHECK_THROWS_WITH_AS(conv2d(x, w, 1, 1),
                         doctest::Contains("input channels 2"), Error);
  }

  TEST_CASE("linear identity and hand arithmetic") {
    Tape tape;
    const float xv[] = {1.0f, 2.0f};
    const float wv[] = {1.0f, 0.0f, 0.0f, 1.0f};
    Value x = tape.input({1, 2}, xv);
    Value w = tape.input({2, 2}, wv);
    Value y = linear(x, w);
    CHECK(tape.value(y)[0] == doctest::Approx(1.0f));
    CHECK(tape.value(y)[1] == doctest::Approx(2.0f));

    const float xv2[] = {1.0f};
    const float wv2[] = {1.0f, -1.0f};
    const float bv2[] = {0.5f, 0.5f};
    Value x2 = tape.input({1, 1}, xv2);
    Value w2 = tape.input({2, 1}, wv2);
    Value b2 = tape.input({2}, bv2);
    Value y2 = linear(x2, w2, b2);
    CHECK(tape.value(y2)[0] == doctest::Approx(1.5f));
    CHECK(tape.value(y2)[1] == doctest::Approx(-0.5f));
  }

  TEST_CASE("linear matches the naive oracle") {
    std::mt19937 rng(13);
    const auto xv = random_vec<float>(4 * 6, rng);
    const auto wv = random_vec<float>(5 * 6, rng);
    const auto bv = random_vec<float>(5, rng);
    Tape tape;
    Value x = tape.input({4, 6}, xv.data());
    Value w = tape.input({5, 6}, wv.data());
    Value b = tape.input({5}, bv.data());
    Value y = linear(x, w, b);
    const auto expect = oracle::naive_linear(xv, 4, 6, wv, 5, bv.data());
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(tape.value(y)[i] - expect[i]) <= 1e-5f);
    }
    Value bad = tape.input({4, 5}, wv.data());
    CHECK_THROWS_AS(linear(bad, w), Error);
  }

  TEST_CASE("batchnorm normalizes a two-sample channel") {
    BatchNormState st("bn", 1);
    st.epsilon = 0.0f;
    Tape tape;
    const float xv[] = {1.0f, 3.0f};
    Value x = tape.input({2, 1}, xv);
    Value y = batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, BnMode::Train);
    CHECK(tape.value(y)[0] == doctest::Approx(-1.0f));
    CHECK(tape.value(y)[1] == doctest::Approx(1.0f));
  }

  TEST_CASE("batchnorm with gamma 0 outputs beta") {
    BatchNormState st("bn", 2);
    std::fill(st.gamma.value.begin(), st.gamma.value.end(), 0.0f);
    std::fill(st.beta.value.begin(), st.beta.value.end(), 0.3f);
    std::mt19937 rng(3);
    const auto xv = random_vec<float>(4 * 2 * 3 * 3, rng);
    Tape tape;
    Value x = tape.input({4, 2, 3, 3}, xv.data());
    Value y = batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, BnMode::Train);
    for (float v : tape.value(y)) CHECK(v == doctest::Approx(0.3f));
  }

  TEST_CASE("batchnorm inference uses running statistics") {
    BatchNormState st("bn", 1);
    st.running_mean[0] = 0.0f;
    st.running_var[0] = 1.0f - st.epsilon;
    st.gamma.value[0] = 2.0f;
    st.beta.value[0] = 1.0f;
    Tape tape;
    const float xv[] = {0.5f};
    Value x = tape.input({1, 1}, xv);
    Value y = batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, BnMode::Inference);
    CHECK(tape.value(y)[0] == doctest::Approx(2.0f));
  }

  TEST_CASE("batchnorm train mode rejects single-sample channels") {
    BatchNormState st("bn", 3);
    Tape tape;
    const float xv[] = {1.0f, 2.0f, 3.0f};
    Value x = tape.input({1, 3}, xv);
    CHECK_THROWS_AS(batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, BnMode::Train),
                    Error);
  }

  TEST_CASE("batchnorm train output has mean beta and unit variance") {
    std::mt19937 rng(17);
    BatchNormState st("bn", 3);
    std::fill(st.beta.value.begin(), st.beta.value.end(), 0.25f);
    const auto xv = random_vec<float>(8 * 3 * 4 * 4, rng, -3.0f, 5.0f);
    Tape tape;
    Value x = tape.input({8, 3, 4, 4}, xv.data());
    Value y = batchnorm(x, tape.param(st.gamma), tape.param(st.beta), st, BnMode::Train);
    const auto& out = tape.value(y);
    const int spatial = 16, n = 8, c = 3;
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0.0, var = 0.0;
      for (int i = 0; i < n; ++i) {
        for (int s = 0; s < spatial; ++s) mean += out[static_cast<size_t>((i * c + ch) * spatial + s)];
      }
      mean /= n * spatial;
      for (int i = 0; i < n; ++i) {
        for (int s = 0; s < spatial; ++s) {
          const double d = out[static_cast<size_t>((i * c + ch) * spatial + s)] - mean;
          var += d * d;
        }
      }
      var /= n * spatial;
      CHECK(mean == doctest::Approx(0.25).epsilon(1e-5));
      // gamma is 1, beta shifts only; the epsilon correction shrinks the
      // variance slightly below 1
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
  }

  TEST_CASE("relu, pooling and softmax basics") {
    Tape tape;
    const float xv[] = {-1.0f, 0.0f, 2.0f};
    Value x = tape.input({1, 3}, xv);
    Value y = relu(x);
    CHECK(tape.value(y) == std::vector<float>{0.0f, 0.0f, 2.0f});

    std::vector<float> logits(10, 0.0f);
    Value l = tape.input({1, 10}, logits.data());
    Value loss = softmax_cross_entropy(l, {3});
    CHECK(tape.value(loss)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-6));

    logits[7] = 20.0f;
    Value l2 = tape.input({1, 10}, logits.data());
    Value loss2 = softmax_cross_entropy(l2, {7});
    CHECK(tape.value(loss2)[0] < 1e-6f);

    CHECK_THROWS_AS(softmax_cross_entropy(l2, {10}), Error);
    CHECK_THROWS_AS(softmax_cross_entropy(l2, {-1}), Error);
  }

  TEST_CASE("max pool picks maxima and global pool averages") {
    Tape tape;
    const float xv[] = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
    Value x = tape.input({1, 1, 4, 4}, xv);
    Value p = max_pool2d(x, 2, 2, 0);
    CHECK(tape.value(p) == std::vector<float>{6, 8, 14, 16});
    Value gap = global_avg_pool(x);
    CHECK(tape.value(gap)[0] == doctest::Approx(8.5f));
  }

  TEST_CASE("backward of sum(w * x) is x") {
    TapeT<double> tape;
    ParamT<double> w("w", {4});
    w.value = {1.0, -2.0, 0.5, 3.0};
    const double xv[] = {2.0, 4.0, -1.0, 0.25};
    auto x = tape.input({4}, xv);
    auto loss = sum(mul(tape.param(w), x));
    tape.backward(loss);
    for (int i = 0; i < 4; ++i) CHECK(w.grad[static_cast<size_t>(i)] == doctest::Approx(xv[i]));
  }

  TEST_CASE("backward rejects non-scalar losses") {
    Tape tape;
    const float xv[] = {1.0f, 2.0f};
    Value x = tape.input({2}, xv);
    Value y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), Error);
  }

  TEST_CASE("a parameter used twice receives the sum of both path gradients") {
    TapeT<double> tape;
    ParamT<double> w("w", {2});
    w.value = {3.0, 5.0};
    const double xv[] = {1.0, 1.0};
    auto x = tape.input({2}, xv);
    auto leaf = tape.param(w);
    // loss = sum(w*x) + sum(w*w) -> dL/dw = x + 2w
    auto loss = sum(add(mul(leaf, x), mul(leaf, leaf)));
    tape.backward(loss);
    CHECK(w.grad[0] == doctest::Approx(1.0 + 6.0));
    CHECK(w.grad[1] == doctest::Approx(1.0 + 10.0));

    // the same parameter leased twice also accumulates
    ParamT<double> v("v", {1});
    v.value = {2.0};
    TapeT<double> t2;
    auto l1 = t2.param(v);
    auto l2 = t2.param(v);
    auto loss2 = sum(mul(l1, l2));  // v^2 -> d/dv = 2v = 4
    t2.backward(loss2);
    CHECK(v.grad[0] == doctest::Approx(4.0));
  }

  TEST_CASE("gradients are bit-deterministic") {
    auto run = [](std::vector<float>& out_grads) {
      std::mt19937 rng(23);
      const auto xv = random_vec<float>(2 * 3 * 6 * 6, rng);
      ParamT<float> w("w", {4, 3, 3, 3});
      w.value = random_vec<float>(4 * 3 * 3 * 3, rng);
      Tape tape;
      Value x = tape.input({2, 3, 6, 6}, xv.data());
      Value y = conv2d(x, tape.param(w), 1, 1);
      Value loss = sum(mul(y, y));
      tape.backward(loss);
      out_grads = w.grad;
    };
    std::vector<float> a, b;
    run(a);
    run(b);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }
}

TEST_SUITE("gradcheck") {
  TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937 rng(31);
    std::vector<TensorT<double>> inputs;
    inputs.emplace_back(Shape{2, 3, 5, 5}, random_vec<double>(2 * 3 * 5 * 5, rng));
    inputs.emplace_back(Shape{4, 3, 3, 3}, random_vec<double>(4 * 3 * 3 * 3, rng));
    inputs.emplace_back(Shape{4}, random_vec<double>(4, rng));
    auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
      auto y = conv2d(in[0], in[1], in[2], 2, 1);
      return sum(mul(y, y));
    });
    CHECK(res.max_rel_err <= 1e-4);
  }

  TEST_CASE("linear gradients match finite differences") {
    std::mt19937 rng(37);
    std::vector<TensorT<double>> inputs;
    inputs.emplace_back(Shape{3, 4}, random_vec<double>(12, rng));
    inputs.emplace_back(Shape{5, 4}, random_vec<double>(20, rng));
    inputs.emplace_back(Shape{5}, random_vec<double>(5, rng));
    auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
      auto y = linear(in[0], in[1], in[2]);
      return sum(mul(y, y));
    });
    CHECK(res.max_rel_err <= 1e-4);
  }

  TEST_CASE("batchnorm train gradients match finite differences") {
    std::mt19937 rng(41);
    std::vector<TensorT<double>> inputs;
    inputs.emplace_back(Shape{4, 3, 2, 2}, random_vec<double>(4 * 3 * 2 * 2, rng));
    inputs.emplace_back(Shape{3}, random_vec<double>(3, rng, 0.5, 1.5));
    inputs.emplace_back(Shape{3}, random_vec<double>(3, rng));
    BatchNormStateT<double> st("bn", 3);
    auto res = oracle::check_gradients(inputs, [&st](TapeT<double>&, const auto& in) {
      auto y = batchnorm(in[0], in[1], in[2], st, BnMode::Train);
      return sum(mul(y, y));
    });
    CHECK(res.max_rel_err <= 1e-4);
  }

  TEST_CASE("batchnorm inference gradients match finite differences") {
    std::mt19937 rng(43);
    std::vector<TensorT<double>> inputs;
    inputs.emplace_back(Shape{4, 3}, random_vec<double>(12, rng));
    inputs.emplace_back(Shape{3}, random_vec<double>(3, rng, 0.5, 1.5));
    inputs.emplace_back(Shape{3}, random_vec<double>(3, rng));
    BatchNormStateT<double> st("bn", 3);
    st.running_mean = {0.2, -0.4, 0.1};
    st.running_var = {1.5, 0.7, 2.0};
    auto res = oracle::check_gradients(inputs, [&st](TapeT<double>&, const auto& in) {
      auto y = batchnorm(in[0], in[1], in[2], st, BnMode::Inference);
      return sum(mul(y, y));
    });
    CHECK(res.max_rel_err <= 1e-4);
  }

  TEST_CASE("relu, pooling, add, reshape and softmax gradients") {
    std::mt19937 rng(47);
    // keep relu inputs away from the kink and pooling inputs tie-free
    std::vector<double> base = random_vec<double>(2 * 2 * 4 * 4, rng);
    for (auto& v : base) {
      if (std::abs(v) < 0.05) v += 0.1;
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{2, 2, 4, 4}, base);
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        return sum(mul(relu(in[0]), relu(in[0])));
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{2, 2, 4, 4}, base);
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        auto y = max_pool2d(in[0], 2, 2, 0);
        return sum(mul(y, y));
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{2, 2, 4, 4}, base);
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        auto y = global_avg_pool(in[0]);
        return sum(mul(y, y));
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{2, 3}, random_vec<double>(6, rng));
      inputs.emplace_back(Shape{2, 3}, random_vec<double>(6, rng));
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        auto y = add(in[0], in[1]);
        return sum(mul(y, y));
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{2, 2, 2, 2}, random_vec<double>(16, rng));
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        auto y = reshape(in[0], Shape{2, 8});
        return sum(mul(y, y));
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
    {
      std::vector<TensorT<double>> inputs;
      inputs.emplace_back(Shape{3, 5}, random_vec<double>(15, rng));
      auto res = oracle::check_gradients(inputs, [](TapeT<double>&, const auto& in) {
        return softmax_cross_entropy(in[0], {1, 4, 0});
      });
      CHECK(res.max_rel_err <= 1e-4);
    }
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("zero momentum is plain sgd") {
    Param p("p", {1});
    p.value = {0.0f};
    p.grad = {1.0f};
    p.has_grad = true;
    std::vector<Param*> params{&p};
    sgd_nesterov_step(params, 0.1f, 0.0f);
    CHECK(p.value[0] == doctest::Approx(-0.1f));
    CHECK(p.has_grad == false);
  }

  TEST_CASE("two steps on f(w) = w^2/2 match the hand recursion") {
    // v <- mu v + g; w <- w - lr (g + mu v), mu = 0.9, lr = 0.1, w0 = 1:
    //   g1 = 1    -> v = 1,     w = 1 - 0.1*1.9      = 0.81
    //   g2 = 0.81 -> v = 1.71,  w = 0.81 - 0.1*2.349 = 0.5751
    Param p("p", {1});
    p.value = {1.0f};
    std::vector<Param*> params{&p};
    p.grad = {p.value[0]};
    p.has_grad = true;
    sgd_nesterov_step(params, 0.1f, 0.9f);
    CHECK(p.value[0] == doctest::Approx(0.81f).epsilon(1e-6));
    p.grad = {p.value[0]};
    p.has_grad = true;
    sgd_nesterov_step(params, 0.1f, 0.9f);
    CHECK(p.value[0] == doctest::Approx(0.5751f).epsilon(1e-6));
  }

  TEST_CASE("zero gradient leaves a resting parameter unchanged and decays velocity") {
    Param p("p", {1});
    p.value = {2.0f};
    p.grad = {0.0f};
    p.has_grad = true;
    std::vector<Param*> params{&p};
    sgd_nesterov_step(params, 0.1f, 0.9f);
    CHECK(p.value[0] == doctest::Approx(2.0f));
    CHECK(p.velocity[0] == doctest::Approx(0.0f));

    Param q("q", {1});
    q.value = {1.0f};
    q.velocity = {0.5f};
    q.grad = {0.0f};
    q.has_grad = true;
    std::vector<Param*> qs{&q};
    sgd_nesterov_step(qs, 0.1f, 0.9f);
    CHECK(q.velocity[0] == doctest::Approx(0.45f));
  }

  TEST_CASE("missing gradient is an error") {
    Param p("p", {1});
    std::vector<Param*> params{&p};
    CHECK_THROWS_WITH_AS(sgd_nesterov_step(params, 0.1f, 0.9f), doctest::Contains("no gradient"),
                         Error);
  }
}
