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

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "otf/model.hpp"

namespace otf::stream {

/// Conv with the following eval-mode BN merged into its weights and bias.
struct FoldedLayer {
  Tensor weight;  // [Cout, Cin, kh, kw]
  std::vector<float> bias;
  ConvGeometry geom;
};

/// w' = w * gamma / sqrt(var + eps) per output channel, b' = (b - mean) * gamma / sqrt(var + eps) + beta.
/// `bias` may be null (treated as zero).
FoldedLayer fold_batchnorm(const Tensor& weight, const Tensor* bias, const ConvGeometry& geom, const Tensor& gamma,
                           const Tensor& beta, const Tensor& running_mean, const Tensor& running_var, double eps);

enum class LayerKind { conv, affine, relu, add };

/// One row-buffered stage. Conv layers absorb a directly following BN and ReLU, standalone BN
/// becomes a per-channel affine map, add layers may absorb a following ReLU.
struct StreamLayer {
  LayerKind kind = LayerKind::conv;
  std::string name;
  /// Layer indices feeding this one; -1 is the input pixel row.
  std::vector<int> inputs;
  /// Model node whose output rows this layer reproduces.
  int graph_node = -1;
  FoldedLayer conv;
  std::vector<float> scale, shift;
  bool fused_relu = false;
  int in_c = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
  /// Consumes every stride_h-th row it receives.
  int stride_h = 1;
};

struct StreamPlan {
  std::string arch;
  int in_c = 0, in_h = 0, in_w = 0;
  std::vector<StreamLayer> layers;
  /// Layer whose rows feed the global-average accumulator.
  int pool_source = -1;
  Tensor fc_weight;  // [K, C]
  Tensor fc_bias;    // [K]
  /// Floats held by the per-layer row buffers: sum of out_w * out_c.
  std::size_t memory_budget = 0;

  int num_classes() const { return fc_weight.dim(0); }
};

/// Validates that every conv has kernel_h = 1 and pad_h = 0 and that no max-pool remains, then folds
/// BN and lays out the row buffers. Throws StreamError naming the first offending layer.
StreamPlan plan_stream(const nn::Model& model);

/// Row-by-row executor holding one output row per layer.
class StreamState {
 public:
  /// Called for every row a layer emits, in emission order.
  using Observer = std::function<void(int layer, int row, std::span<const float> values)>;

  explicit StreamState(const StreamPlan& plan);

  void set_observer(Observer obs) { observer_ = std::move(obs); }

  /// Feeds the next input row (in_c * in_w floats, channel-major). Returns true once the final
  /// row has been consumed and the logits are available.
  bool push_row(std::span<const float> row);
  /// Normalises 8-bit pixels as (v/255 - mean)/std per channel before pushing.
  bool push_row_bytes(std::span<const std::uint8_t> row, std::span<const float> mean, std::span<const float> std);

  bool done() const { return done_; }
  int rows_pushed() const { return rows_in_; }
  int rows_emitted(int layer) const { return emitted_[static_cast<std::size_t>(layer)]; }
  const std::vector<float>& logits() const;

  /// Floats currently held in layer row buffers; constant after construction.
  std::size_t live_floats() const;
  /// Largest live_floats() observed across all pushes.
  std::size_t peak_floats() const { return peak_; }

 private:
  void run_layer(std::size_t li);

  const StreamPlan* plan_;
  std::vector<std::vector<float>> rows_;
  std::vector<int> received_;
  std::vector<int> emitted_;
  std::vector<char> fired_;
  std::vector<double> pool_sum_;
  std::vector<float> input_;
  std::vector<float> logits_;
  Observer observer_;
  int rows_in_ = 0;
  bool done_ = false;
  std::size_t peak_ = 0;
};

/// Streams one image ([C,H,W] or [1,C,H,W]) through the plan and returns its logits.
std::vector<float> stream_infer(const StreamPlan& plan, const Tensor& image);

/// Max |batch eval logits - streamed logits| for one image.
double equivalence_check(nn::Model& model, const Tensor& image);

}  // namespace otf::stream
