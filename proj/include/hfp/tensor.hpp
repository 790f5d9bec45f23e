// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and trainable parameters. Templated on the scalar
// type: float is the training type, double exists for gradient-check tests.

#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "hfp/error.hpp"

namespace hfp {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty, or data.size() entries

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)) {
    for (int d : shape) require(d > 0, "tensor dimension must be positive, got ", shape_str(shape));
    data.assign(static_cast<size_t>(numel(shape)), T(0));
  }
  TensorT(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    require(static_cast<int64_t>(data.size()) == numel(shape), "tensor data length ", data.size(),
            " does not match shape ", shape_str(shape));
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }

  void alloc_grad() { grad.assign(data.size(), T(0)); }
};

using Tensor = TensorT<float>;

/// A trainable value with a momentum buffer. `name` is the unique id.
template <typename T>
struct ParamT {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;
  bool has_grad = false;

  ParamT() = default;
  ParamT(std::string id, Shape s) : name(std::move(id)), shape(std::move(s)) {
    const size_t n = static_cast<size_t>(numel(shape));
    value.assign(n, T(0));
    grad.assign(n, T(0));
    velocity.assign(n, T(0));
  }

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  void clear_grad() {
    std::fill(grad.begin(), grad.end(), T(0));
    has_grad = false;
  }
};

using Param = ParamT<float>;

}  // namespace hfp
