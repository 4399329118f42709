/* Copyright (c) 2026 The otfnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "otf/optim.hpp"

#include <cmath>

#include "otf/error.hpp"

namespace otf {

void sgd_step(std::span<Parameter* const> params, OptimState& state) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Parameter* p : params) state.velocity.emplace_back(p->value.shape());
  }
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(state.velocity.size()) + " momentum buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    Tensor& v = state.velocity[i];
    if (v.shape() != p.value.shape()) {
      throw ShapeError("sgd_step: momentum buffer of '" + p.name + "' is " + v.shape().str() +
                       " but parameter is " + p.value.shape().str());
    }
    if (p.grad.empty()) p.grad = Tensor(p.value.shape());
    if (p.grad.shape() != p.value.shape()) {
      throw ShapeError("sgd_step: gradient of '" + p.name + "' is " + p.grad.shape().str() +
                       " but parameter is " + p.value.shape().str());
    }
    auto w = p.value.data();
    auto g = p.grad.data();
    auto vel = v.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      vel[j] = state.momentum * vel[j] + g[j] + state.weight_decay * w[j];
      w[j] -= state.lr * vel[j];
    }
  }
}

double lr_at_epoch(int epoch, double base, std::span<const int> milestones, double factor) {
  int passed = 0;
  for (int m : milestones) {
    if (m <= epoch) ++passed;
  }
  return base * std::pow(factor, passed);
}

}  // namespace otf
