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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "otf/autograd.hpp"
#include "otf/ops.hpp"

namespace otf::nn {

enum class Family { vgg, resnet, wrn, tiny };

/// Which architecture to build. `depth`/`widen` follow the usual naming: vgg16, resnet50,
/// wrn28-6 (depth 28, widen 6), tiny6 (six conv layers).
struct ArchSpec {
  Family family = Family::tiny;
  int depth = 4;
  int widen = 1;
  int num_classes = 10;
  int in_channels = 3;
  int in_h = 32;
  int in_w = 32;

  /// Accepts e.g. "vgg16bn", "vgg16", "resnet18", "wrn28-6", "tiny6".
  static ArchSpec parse(std::string_view id, int num_classes = 10);
  /// Canonical identifier ("vgg16bn", "resnet18", "wrn28-6", "tiny6").
  std::string id() const;
  /// Throws ParamError listing the supported set if (family, depth, widen) is not one of them.
  void validate() const;

  bool operator==(const ArchSpec&) const = default;
};

/// Every supported architecture identifier.
std::vector<std::string> supported_arch_ids();

enum class FilterMode { teacher, row_student, column };

/// Placement of the strided convolutions that stand in for VGG max-pools.
enum class SurgeryMode {
  /// First and last pools stay max-pools; interior pools become stride-2 on the preceding conv.
  interior,
  /// Every pool becomes a stride-2 conv (row-streamable VGG students).
  all_pools,
  /// Pool plan of `interior`, but the first and last conv keep the square kernel in every mode.
  edge_convs,
};

std::string to_string(FilterMode m);
std::string to_string(SurgeryMode m);
FilterMode parse_filter_mode(std::string_view s);
SurgeryMode parse_surgery_mode(std::string_view s);

/// Kernel geometry every mode-dependent conv takes: 3x3 pad (1,1), 1x3 pad (0,1), 3x1 pad (1,0).
ConvGeometry mode_geometry(FilterMode mode, int n = 3);

enum class OpKind { input, conv, batchnorm, relu, max_pool, add, global_avg_pool, linear };

struct Node {
  OpKind kind = OpKind::input;
  std::string name;
  std::vector<int> inputs;
  ConvGeometry geom;
  /// Conv whose kernel follows the filter mode (N x N in the teacher).
  bool mode_dependent = false;
  // Per-sample output extents; linear / pooled outputs use h = w = 1.
  int out_c = 0;
  int out_h = 0;
  int out_w = 0;
  // Indices into Model::params(), -1 when absent.
  int weight = -1;
  int bias = -1;
  int running_mean = -1;
  int running_var = -1;
};

struct TapShape {
  int c, h, w;
  bool operator==(const TapShape&) const = default;
};

class GraphBuilder;

/// Layer graph in execution order with its named parameters and feature-tap points.
class Model {
 public:
  const ArchSpec& spec() const { return spec_; }
  FilterMode mode() const { return mode_; }
  SurgeryMode surgery() const { return surgery_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  /// Node indices whose outputs are the distillation features, in order.
  const std::vector<int>& taps() const { return taps_; }
  int output_node() const { return static_cast<int>(nodes_.size()) - 1; }

  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  std::vector<Parameter*> trainable_parameters();
  std::vector<TapShape> tap_shapes() const;
  void zero_grad();

  float bn_eps = 1e-5f;
  float bn_momentum = 0.1f;

 private:
  friend class GraphBuilder;
  ArchSpec spec_;
  FilterMode mode_ = FilterMode::teacher;
  SurgeryMode surgery_ = SurgeryMode::interior;
  std::vector<Node> nodes_;
  std::vector<Parameter> params_;
  std::vector<int> taps_;
};

/// Low-level graph assembly. Family builders use it; tests use it for ad-hoc graphs.
class GraphBuilder {
 public:
  /// With `shapes_only`, parameters are named but not allocated (shape inference only).
  GraphBuilder(int channels, int height, int width, bool shapes_only = false);

  int conv(const std::string& name, int input, int out_channels, const ConvGeometry& g,
           bool mode_dependent = false, bool bias = false);
  int batchnorm(const std::string& name, int input);
  int relu(int input);
  int max_pool(int input);
  int add(int a, int b);
  int global_avg_pool(int input);
  int linear(const std::string& name, int input, int out_features);
  /// conv -> batchnorm -> relu; returns the relu node.
  int conv_bn_relu(const std::string& name, int input, int out_channels, const ConvGeometry& g,
                   bool mode_dependent);
  void tap(int node);

  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  Model finish(const ArchSpec& spec, FilterMode mode, SurgeryMode surgery);

 private:
  int push(Node n);
  int add_param(const std::string& name, Shape shape, float fill, bool trainable);

  std::vector<Node> nodes_;
  std::vector<Parameter> params_;
  std::vector<int> taps_;
  bool shapes_only_ = false;
};

/// Builds a family architecture in the given filter mode. Tapped-feature shapes are
/// verified against the other two modes' geometry before returning.
Model build(const ArchSpec& spec, FilterMode mode, SurgeryMode surgery = SurgeryMode::interior);

/// Per-sample shapes of the tapped features.
std::vector<TapShape> tap_points(const Model& model);

/// Trainable parameter total; with `convs_only`, weights of the mode-dependent convs only.
std::int64_t param_count(const Model& model, bool convs_only);

/// Conv/linear weights ~ N(0, 2/fan_in), biases 0, BN gamma 1 / beta 0, running mean 0 / var 1.
void init_weights(Model& model, std::uint64_t seed);

enum class Role {
  /// Train-mode BN, parameters gradient-tracked.
  trainee,
  /// Eval-mode BN, parameters recorded as constants.
  frozen,
};

/// Executes the graph and returns every node's output, indexed like Model::nodes().
std::vector<Var> run_graph(Model& model, Tape& tape, Var x, Role role);

}  // namespace otf::nn
