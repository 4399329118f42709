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

#pragma once

#include <span>
#include <vector>

#include "otf/autograd.hpp"

namespace otf {

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
struct OptimState {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-5f;
  /// One buffer per parameter, in the order the parameters are passed to sgd_step.
  std::vector<Tensor> velocity;
};

/// Updates every trainable parameter in place from its `grad`. Momentum buffers are created
/// on the first call and must keep mirroring the parameter shapes afterwards.
void sgd_step(std::span<Parameter* const> params, OptimState& state);

/// base * factor^(number of milestones <= epoch)
double lr_at_epoch(int epoch, double base, std::span<const int> milestones, double factor);

}  // namespace otf
