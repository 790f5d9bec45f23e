// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// SGD with Nesterov momentum:
//   v <- mu * v + g
//   w <- w - lr * (g + mu * v)
// Gradients are cleared after the step.

#pragma once

#include <vector>

#include "hfp/error.hpp"
#include "hfp/tensor.hpp"

namespace hfp {

template <typename T>
void sgd_nesterov_step(const std::vector<ParamT<T>*>& params, T learning_rate, T momentum) {
  for (ParamT<T>* p : params) {
    require(p->has_grad, "sgd_nesterov_step: parameter '", p->name, "' has no gradient");
  }
  for (ParamT<T>* p : params) {
    for (size_t i = 0; i < p->value.size(); ++i) {
      const T g = p->grad[i];
      T& v = p->velocity[i];
      v = momentum * v + g;
      p->value[i] -= learning_rate * (g + momentum * v);
    }
    p->clear_grad();
  }
}

}  // namespace hfp
