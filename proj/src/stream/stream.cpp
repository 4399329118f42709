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

#include "otf/stream.hpp"

#include <algorithm>
#include <cmath>

#include "otf/error.hpp"
#include "otf/ops.hpp"

namespace otf::stream {

FoldedLayer fold_batchnorm(const Tensor& weight, const Tensor* bias, const ConvGeometry& geom, const Tensor& gamma,
                           const Tensor& beta, const Tensor& running_mean, const Tensor& running_var, double eps) {
  if (weight.rank() != 4) throw ShapeError("fold_batchnorm: weight must be rank 4, got " + weight.shape().str());
  const int cout = weight.dim(0);
  const auto check = [&](const Tensor& t, const char* what) {
    if (t.size() != static_cast<std::size_t>(cout)) {
      throw ShapeError(std::string("fold_batchnorm: ") + what + " has " + std::to_string(t.size()) +
                       " channels, conv has " + std::to_string(cout));
    }
  };
  check(gamma, "gamma");
  check(beta, "beta");
  check(running_mean, "running_mean");
  check(running_var, "running_var");
  if (bias) check(*bias, "bias");

  FoldedLayer f;
  f.geom = geom;
  f.weight = weight;
  f.bias.resize(static_cast<std::size_t>(cout));
  const std::size_t per_out = weight.size() / static_cast<std::size_t>(cout);
  for (int c = 0; c < cout; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    const double k = static_cast<double>(gamma[cu]) / std::sqrt(static_cast<double>(running_var[cu]) + eps);
    float* w = f.weight.ptr() + cu * per_out;
    for (std::size_t j = 0; j < per_out; ++j) w[j] = static_cast<float>(static_cast<double>(w[j]) * k);
    const double b = bias ? static_cast<double>((*bias)[cu]) : 0.0;
    f.bias[cu] = static_cast<float>((b - static_cast<double>(running_mean[cu])) * k + static_cast<double>(beta[cu]));
  }
  return f;
}

StreamPlan plan_stream(const nn::Model& model) {
  using nn::OpKind;
  const auto& nodes = model.nodes();
  const auto& params = model.params();
  const auto pv = [&](int idx) -> const Tensor& { return params[static_cast<std::size_t>(idx)].value; };
  const std::string arch = model.spec().id() + "/" + nn::to_string(model.mode());

  std::vector<std::vector<int>> consumers(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (int in : nodes[i].inputs) consumers[static_cast<std::size_t>(in)].push_back(static_cast<int>(i));
  }
  // Node index of the sole consumer when it has the given kind, else -1.
  const auto sole = [&](int node, OpKind kind) {
    const auto& c = consumers[static_cast<std::size_t>(node)];
    return c.size() == 1 && nodes[static_cast<std::size_t>(c[0])].kind == kind ? c[0] : -1;
  };

  StreamPlan plan;
  plan.arch = arch;
  plan.in_c = nodes.front().out_c;
  plan.in_h = nodes.front().out_h;
  plan.in_w = nodes.front().out_w;

  std::vector<int> layer_of(nodes.size(), -2);
  layer_of[0] = -1;
  std::vector<char> absorbed(nodes.size(), 0);
  const auto src = [&](int node) {
    const int l = layer_of[static_cast<std::size_t>(node)];
    if (l == -2) throw StreamError(arch + ": node '" + nodes[static_cast<std::size_t>(node)].name + "' has no row source");
    return l;
  };
  const auto in_dims = [&](StreamLayer& L, int node) {
    const nn::Node& n = nodes[static_cast<std::size_t>(node)];
    L.in_c = n.out_c;
    L.in_w = n.out_w;
  };
  // Absorbs a following ReLU into the layer ending at `tail`; returns the new tail.
  const auto take_relu = [&](StreamLayer& L, int tail) {
    const int r = sole(tail, OpKind::relu);
    if (r < 0) return tail;
    L.fused_relu = true;
    absorbed[static_cast<std::size_t>(r)] = 1;
    return r;
  };

  bool pooled = false;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    if (absorbed[i]) continue;
    const nn::Node& n = nodes[i];
    const int self = static_cast<int>(i);
    if (pooled && n.kind != OpKind::linear) {
      throw StreamError(arch + ": node '" + n.name + "' follows the global pool; only a linear head may");
    }
    StreamLayer L;
    L.name = n.name;
    int tail = self;
    switch (n.kind) {
      case OpKind::input: throw StreamError(arch + ": stray input node");
      case OpKind::max_pool:
        throw StreamError(arch + ": layer '" + n.name + "' is a max-pool, not streamable (needs two rows)");
      case OpKind::conv: {
        if (n.geom.kernel_h != 1 || n.geom.pad_h != 0) {
          throw StreamError(arch + ": layer '" + n.name + "' has kernel " + n.geom.str() +
                            ", not streamable (kernel_h must be 1 with no vertical padding)");
        }
        L.kind = LayerKind::conv;
        L.inputs = {src(n.inputs[0])};
        in_dims(L, n.inputs[0]);
        L.stride_h = n.geom.stride_h;
        const Tensor* bias = n.bias >= 0 ? &pv(n.bias) : nullptr;
        const int bn = sole(self, OpKind::batchnorm);
        if (bn >= 0) {
          const nn::Node& b = nodes[static_cast<std::size_t>(bn)];
          L.conv = fold_batchnorm(pv(n.weight), bias, n.geom, pv(b.weight), pv(b.bias), pv(b.running_mean),
                                  pv(b.running_var), model.bn_eps);
          absorbed[static_cast<std::size_t>(bn)] = 1;
          tail = bn;
        } else {
          L.conv.weight = pv(n.weight);
          L.conv.geom = n.geom;
          L.conv.bias.assign(static_cast<std::size_t>(n.out_c), 0.0f);
          if (bias) std::copy(bias->data().begin(), bias->data().end(), L.conv.bias.begin());
        }
        tail = take_relu(L, tail);
        break;
      }
      case OpKind::batchnorm: {
        L.kind = LayerKind::affine;
        L.inputs = {src(n.inputs[0])};
        in_dims(L, n.inputs[0]);
        const Tensor& g = pv(n.weight);
        const Tensor& b = pv(n.bias);
        const Tensor& m = pv(n.running_mean);
        const Tensor& v = pv(n.running_var);
        for (std::size_t c = 0; c < g.size(); ++c) {
          const double k = static_cast<double>(g[c]) / std::sqrt(static_cast<double>(v[c]) + model.bn_eps);
          L.scale.push_back(static_cast<float>(k));
          L.shift.push_back(static_cast<float>(static_cast<double>(b[c]) - static_cast<double>(m[c]) * k));
        }
        tail = take_relu(L, tail);
        break;
      }
      case OpKind::relu:
        L.kind = LayerKind::relu;
        L.inputs = {src(n.inputs[0])};
        in_dims(L, n.inputs[0]);
        break;
      case OpKind::add:
        L.kind = LayerKind::add;
        L.inputs = {src(n.inputs[0]), src(n.inputs[1])};
        in_dims(L, n.inputs[0]);
        tail = take_relu(L, tail);
        break;
      case OpKind::global_avg_pool:
        plan.pool_source = src(n.inputs[0]);
        pooled = true;
        continue;
      case OpKind::linear:
        if (!pooled) throw StreamError(arch + ": linear layer '" + n.name + "' must follow the global pool");
        if (!plan.fc_weight.empty()) throw StreamError(arch + ": more than one linear layer after the pool");
        plan.fc_weight = pv(n.weight);
        plan.fc_bias = pv(n.bias);
        continue;
    }
    const nn::Node& t = nodes[static_cast<std::size_t>(tail)];
    L.graph_node = tail;
    L.out_c = t.out_c;
    L.out_h = t.out_h;
    L.out_w = t.out_w;
    layer_of[static_cast<std::size_t>(tail)] = static_cast<int>(plan.layers.size());
    plan.layers.push_back(std::move(L));
  }
  if (plan.pool_source < 0 || plan.fc_weight.empty()) {
    throw StreamError(arch + ": streaming needs a global-average-pool + linear head");
  }
  for (const StreamLayer& L : plan.layers) {
    plan.memory_budget += static_cast<std::size_t>(L.out_w) * static_cast<std::size_t>(L.out_c);
  }
  return plan;
}

StreamState::StreamState(const StreamPlan& plan)
    : plan_(&plan),
      received_(plan.layers.size(), 0),
      emitted_(plan.layers.size(), 0),
      fired_(plan.layers.size(), 0),
      input_(static_cast<std::size_t>(plan.in_c) * static_cast<std::size_t>(plan.in_w)) {
  rows_.reserve(plan.layers.size());
  for (const StreamLayer& L : plan.layers) {
    rows_.emplace_back(static_cast<std::size_t>(L.out_c) * static_cast<std::size_t>(L.out_w), 0.0f);
  }
  pool_sum_.assign(static_cast<std::size_t>(plan.layers[static_cast<std::size_t>(plan.pool_source)].out_c), 0.0);
  peak_ = live_floats();
}

std::size_t StreamState::live_floats() const {
  std::size_t total = 0;
  for (const auto& r : rows_) total += r.size();
  return total;
}

const std::vector<float>& StreamState::logits() const {
  if (!done_) throw StreamError("logits requested before the final row");
  return logits_;
}

void StreamState::run_layer(std::size_t li) {
  const StreamLayer& L = plan_->layers[li];
  const auto row_of = [&](int src) -> const std::vector<float>& {
    return src < 0 ? input_ : rows_[static_cast<std::size_t>(src)];
  };
  const auto fired = [&](int src) { return src < 0 ? true : fired_[static_cast<std::size_t>(src)] != 0; };

  if (L.kind == LayerKind::add) {
    const bool a = fired(L.inputs[0]);
    const bool b = fired(L.inputs[1]);
    if (a != b) throw StreamError("layer '" + L.name + "': operands arrive on different rows");
    if (!a) return;
  } else if (!fired(L.inputs[0])) {
    return;
  }
  const int phase = received_[li]++;
  if (phase % L.stride_h != 0) return;

  std::vector<float>& out = rows_[li];
  const std::vector<float>& in = row_of(L.inputs[0]);
  const std::size_t ow = static_cast<std::size_t>(L.out_w);
  switch (L.kind) {
    case LayerKind::conv: {
      const ConvGeometry& g = L.conv.geom;
      const int cin = L.in_c;
      const int kw = g.kernel_w;
      const float* w = L.conv.weight.ptr();
      for (int co = 0; co < L.out_c; ++co) {
        for (int ox = 0; ox < L.out_w; ++ox) {
          double acc = L.conv.bias[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < cin; ++ci) {
            const float* wr = w + (static_cast<std::size_t>(co) * cin + ci) * kw;
            const float* ir = in.data() + static_cast<std::size_t>(ci) * L.in_w;
            for (int k = 0; k < kw; ++k) {
              const int x = ox * g.stride_w + k - g.pad_w;
              if (x >= 0 && x < L.in_w) acc += static_cast<double>(wr[k]) * static_cast<double>(ir[x]);
            }
          }
          out[static_cast<std::size_t>(co) * ow + static_cast<std::size_t>(ox)] = static_cast<float>(acc);
        }
      }
      break;
    }
    case LayerKind::affine:
      for (std::size_t c = 0; c < static_cast<std::size_t>(L.out_c); ++c) {
        for (std::size_t x = 0; x < ow; ++x) out[c * ow + x] = in[c * ow + x] * L.scale[c] + L.shift[c];
      }
      break;
    case LayerKind::relu:
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(in[j], 0.0f);
      break;
    case LayerKind::add: {
      const std::vector<float>& in2 = row_of(L.inputs[1]);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = in[j] + in2[j];
      break;
    }
  }
  if (L.fused_relu) {
    for (float& v : out) v = std::max(v, 0.0f);
  }
  fired_[li] = 1;
  if (observer_) observer_(static_cast<int>(li), emitted_[li], out);
  ++emitted_[li];
}

bool StreamState::push_row(std::span<const float> row) {
  if (done_) throw StreamError(plan_->arch + ": row pushed after the final row");
  if (row.size() != input_.size()) {
    throw StreamError(plan_->arch + ": input row has " + std::to_string(row.size()) + " values, expected " +
                      std::to_string(input_.size()) + " (" + std::to_string(plan_->in_c) + " channels x " +
                      std::to_string(plan_->in_w) + ")");
  }
  std::copy(row.begin(), row.end(), input_.begin());
  std::fill(fired_.begin(), fired_.end(), 0);
  for (std::size_t li = 0; li < plan_->layers.size(); ++li) run_layer(li);

  const auto ps = static_cast<std::size_t>(plan_->pool_source);
  if (fired_[ps]) {
    const std::vector<float>& r = rows_[ps];
    const std::size_t w = static_cast<std::size_t>(plan_->layers[ps].out_w);
    for (std::size_t c = 0; c < pool_sum_.size(); ++c) {
      double s = 0.0;
      for (std::size_t x = 0; x < w; ++x) s += r[c * w + x];
      pool_sum_[c] += s;
    }
  }
  peak_ = std::max(peak_, live_floats());

  if (++rows_in_ < plan_->in_h) return false;

  const StreamLayer& P = plan_->layers[ps];
  if (emitted_[ps] != P.out_h) {
    throw StreamError(plan_->arch + ": pool source emitted " + std::to_string(emitted_[ps]) + " rows, expected " +
                      std::to_string(P.out_h));
  }
  const double area = static_cast<double>(P.out_h) * static_cast<double>(P.out_w);
  const int k = plan_->num_classes();
  const std::size_t f = pool_sum_.size();
  logits_.assign(static_cast<std::size_t>(k), 0.0f);
  for (std::size_t o = 0; o < static_cast<std::size_t>(k); ++o) {
    double acc = plan_->fc_bias[o];
    for (std::size_t c = 0; c < f; ++c) acc += static_cast<double>(plan_->fc_weight[o * f + c]) * (pool_sum_[c] / area);
    logits_[o] = static_cast<float>(acc);
  }
  done_ = true;
  return true;
}

bool StreamState::push_row_bytes(std::span<const std::uint8_t> row, std::span<const float> mean,
                                 std::span<const float> std) {
  const auto c = static_cast<std::size_t>(plan_->in_c);
  const auto w = static_cast<std::size_t>(plan_->in_w);
  if (row.size() != c * w) {
    throw StreamError(plan_->arch + ": input row has " + std::to_string(row.size()) + " bytes, expected " +
                      std::to_string(c * w));
  }
  if (mean.size() != c || std.size() != c) throw StreamError("normalisation constants do not match channel count");
  std::vector<float> buf(c * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t x = 0; x < w; ++x) {
      buf[ch * w + x] = (static_cast<float>(row[ch * w + x]) / 255.0f - mean[ch]) / std[ch];
    }
  }
  return push_row(buf);
}

std::vector<float> stream_infer(const StreamPlan& plan, const Tensor& image) {
  const Shape& s = image.shape();
  const bool batched = s.rank() == 4;
  if (!(s.rank() == 3 || (batched && s[0] == 1))) {
    throw ShapeError("stream_infer: image must be [C,H,W] or [1,C,H,W], got " + s.str());
  }
  const int off = batched ? 1 : 0;
  if (s[off] != plan.in_c || s[off + 1] != plan.in_h || s[off + 2] != plan.in_w) {
    throw ShapeError("stream_infer: image " + s.str() + " does not match plan input " + std::to_string(plan.in_c) +
                     "x" + std::to_string(plan.in_h) + "x" + std::to_string(plan.in_w));
  }
  StreamState st(plan);
  std::vector<float> row(static_cast<std::size_t>(plan.in_c) * static_cast<std::size_t>(plan.in_w));
  const std::size_t plane = static_cast<std::size_t>(plan.in_h) * static_cast<std::size_t>(plan.in_w);
  for (int y = 0; y < plan.in_h; ++y) {
    for (std::size_t c = 0; c < static_cast<std::size_t>(plan.in_c); ++c) {
      const float* src = image.ptr() + c * plane + static_cast<std::size_t>(y) * plan.in_w;
      std::copy(src, src + plan.in_w, row.begin() + static_cast<std::ptrdiff_t>(c * plan.in_w));
    }
    st.push_row(row);
  }
  return st.logits();
}

double equivalence_check(nn::Model& model, const Tensor& image) {
  const StreamPlan plan = plan_stream(model);
  const std::vector<float> streamed = stream_infer(plan, image);
  Tensor x = image;
  if (x.rank() == 3) x = Tensor(Shape{1, x.dim(0), x.dim(1), x.dim(2)}, std::vector<float>(x.data().begin(), x.data().end()));
  Tape tape;
  const std::vector<Var> outs = nn::run_graph(model, tape, tape.constant(std::move(x)), nn::Role::frozen);
  const Tensor& batch = outs.back().value();
  double diff = 0.0;
  for (std::size_t i = 0; i < streamed.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(batch[i]) - static_cast<double>(streamed[i])));
  }
  return diff;
}

}  // namespace otf::stream
