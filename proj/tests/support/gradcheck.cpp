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

#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "otf/ops.hpp"
#include "reference.hpp"

namespace gc {

using otf::ConvGeometry;
using otf::nn::GraphBuilder;

otf::nn::Model random_tiny_model(std::mt19937_64& rng, int num_classes) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int c = pick(1, 3);
  int h = 2 * pick(2, 4), w = 2 * pick(2, 4);
  GraphBuilder b(c, h, w);
  int cur = 0;
  const int blocks = pick(1, 3);
  for (int i = 0; i < blocks; ++i) {
    const std::string name = "b" + std::to_string(i);
    ConvGeometry g;
    switch (pick(0, 2)) {
      case 0: g = ConvGeometry::square(3); break;
      case 1: g = ConvGeometry::row(3); break;
      default: g = ConvGeometry::column(3); break;
    }
    if (h >= 4 && w >= 4 && pick(0, 3) == 0) g = g.with_stride(2);
    cur = b.conv(name + ".conv", cur, pick(2, 4), g, false, pick(0, 1) == 1);
    if (pick(0, 1) == 1) cur = b.batchnorm(name + ".bn", cur);
    cur = b.relu(cur);
    if (i == 0) b.tap(cur);
    h = b.node(cur).out_h;
    w = b.node(cur).out_w;
    if (h % 2 == 0 && w % 2 == 0 && h >= 4 && pick(0, 2) == 0) {
      cur = b.max_pool(cur);
      h /= 2;
      w /= 2;
    }
  }
  b.tap(cur);
  cur = b.global_avg_pool(cur);
  b.linear("fc", cur, num_classes);
  otf::nn::ArchSpec spec;
  spec.num_classes = num_classes;
  spec.in_channels = c;
  spec.in_h = b.node(0).out_h;
  spec.in_w = b.node(0).out_w;
  auto model = b.finish(spec, otf::nn::FilterMode::teacher, otf::nn::SurgeryMode::interior);
  otf::nn::init_weights(model, rng());
  // Non-trivial BN affine parameters and biases so their gradients are exercised.
  std::normal_distribution<float> nd(0.0f, 0.3f);
  for (auto& p : model.params()) {
    if (!p.trainable || p.value.rank() != 1) continue;
    for (float& v : p.value.data()) v += nd(rng);
  }
  return model;
}

GradcheckResult gradcheck(otf::nn::Model& model, const otf::Tensor& x, const std::vector<int>& labels,
                          std::mt19937_64& rng, double h, double rel_tol, double floor, int max_coords) {
  // Running statistics move during the autodiff pass; the reference pass uses batch statistics
  // only, so snapshot the parameters first.
  auto params = ref::params_as_double(model);
  model.zero_grad();
  {
    otf::Tape tape;
    auto outs = otf::nn::run_graph(model, tape, tape.constant(x), otf::nn::Role::trainee);
    auto loss = otf::cross_entropy(outs.back(), labels);
    tape.backward(loss);
  }
  const ref::Map xm = ref::from_tensor(x);
  auto loss_at = [&]() { return ref::cross_entropy(ref::forward(model, params, xm, true), labels); };

  std::vector<std::pair<int, std::size_t>> coords;
  for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
    const auto& p = model.params()[pi];
    if (!p.trainable) continue;
    for (std::size_t j = 0; j < p.value.size(); ++j) coords.emplace_back(static_cast<int>(pi), j);
  }
  std::shuffle(coords.begin(), coords.end(), rng);
  if (static_cast<int>(coords.size()) > max_coords) coords.resize(static_cast<std::size_t>(max_coords));

  GradcheckResult r;
  for (auto [pi, j] : coords) {
    auto& v = params[static_cast<std::size_t>(pi)][j];
    const double orig = v;
    v = orig + h;
    const double up = loss_at();
    v = orig - h;
    const double down = loss_at();
    v = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = model.params()[static_cast<std::size_t>(pi)].grad[j];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
    const double rel = std::abs(numeric - analytic) / denom;
    r.worst_rel = std::max(r.worst_rel, rel);
    ++r.checked;
    if (rel <= rel_tol) ++r.passed;
  }
  return r;
}

}  // namespace gc
