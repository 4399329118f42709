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

#include "otf/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include "otf/error.hpp"

namespace otf::nn {

namespace {

struct Supported {
  Family family;
  int depth;
  int widen;
};

constexpr Supported kSupported[] = {
    {Family::vgg, 13, 1},    {Family::vgg, 16, 1},    {Family::vgg, 19, 1},
    {Family::resnet, 18, 1}, {Family::resnet, 34, 1}, {Family::resnet, 50, 1},
    {Family::wrn, 10, 10},   {Family::wrn, 16, 8},    {Family::wrn, 28, 6},
    {Family::wrn, 40, 4},    {Family::tiny, 4, 1},    {Family::tiny, 5, 1},
    {Family::tiny, 6, 1},    {Family::tiny, 7, 1},    {Family::tiny, 8, 1},
    {Family::tiny, 9, 1},    {Family::tiny, 10, 1},
};

std::string supported_list() {
  std::string out;
  for (const auto& id : supported_arch_ids()) {
    if (!out.empty()) out += ", ";
    out += id;
  }
  return out;
}

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Standard VGG plans; 0 marks a max-pool.
std::vector<int> vgg_plan(int depth) {
  switch (depth) {
    case 13:
      return {64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0};
    case 16:
      return {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};
    case 19:
      return {64,  64,  0,   128, 128, 0,   256, 256, 256, 256, 0,
              512, 512, 512, 512, 0,   512, 512, 512, 512, 0};
    default:
      throw ParamError("unsupported VGG depth " + std::to_string(depth));
  }
}

void add_tap_unique(GraphBuilder& b, std::vector<int>& seen, int node) {
  if (std::find(seen.begin(), seen.end(), node) == seen.end()) {
    seen.push_back(node);
    b.tap(node);
  }
}

void build_vgg(GraphBuilder& b, const ArchSpec& spec, FilterMode mode, SurgeryMode surgery) {
  const std::vector<int> plan = vgg_plan(spec.depth);
  const ConvGeometry mode_g = mode_geometry(mode);
  const int pools = static_cast<int>(std::count(plan.begin(), plan.end(), 0));
  const int convs = static_cast<int>(plan.size()) - pools;

  // Which pools survive, and which convs absorb a replaced pool as stride 2.
  std::vector<bool> keep_pool(static_cast<std::size_t>(pools), false);
  if (surgery != SurgeryMode::all_pools) {
    keep_pool.front() = true;
    keep_pool.back() = true;
  }
  std::vector<int> conv_stride(static_cast<std::size_t>(convs), 1);
  {
    int conv_idx = -1, pool_idx = 0;
    for (int v : plan) {
      if (v != 0) {
        ++conv_idx;
      } else {
        if (!keep_pool[static_cast<std::size_t>(pool_idx)]) conv_stride[static_cast<std::size_t>(conv_idx)] = 2;
        ++pool_idx;
      }
    }
  }

  std::vector<int> taps;
  int cur = 0;
  int conv_idx = 0, pool_idx = 0;
  int prev_relu = -1;
  int prev_channels = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int v = plan[i];
    if (v == 0) {
      if (keep_pool[static_cast<std::size_t>(pool_idx)]) cur = b.max_pool(cur);
      ++pool_idx;
      continue;
    }
    if (prev_relu >= 0 && v > prev_channels) add_tap_unique(b, taps, prev_relu);
    const bool edge = surgery == SurgeryMode::edge_convs && (conv_idx == 0 || conv_idx == convs - 1);
    const ConvGeometry g = (edge ? ConvGeometry::square() : mode_g)
                               .with_stride(conv_stride[static_cast<std::size_t>(conv_idx)]);
    cur = b.conv_bn_relu("features." + std::to_string(conv_idx), cur, v, g, !edge);
    if (conv_idx == 0) add_tap_unique(b, taps, cur);
    prev_relu = cur;
    prev_channels = v;
    ++conv_idx;
  }
  cur = b.global_avg_pool(cur);
  b.linear("classifier", cur, spec.num_classes);
}

int resnet_basic_block(GraphBuilder& b, const std::string& name, int in, int planes, int stride,
                       const ConvGeometry& mode_g) {
  const int in_c = b.node(in).out_c;
  int x = b.conv(name + ".conv1", in, planes, mode_g.with_stride(stride), true);
  x = b.batchnorm(name + ".bn1", x);
  x = b.relu(x);
  x = b.conv(name + ".conv2", x, planes, mode_g, true);
  x = b.batchnorm(name + ".bn2", x);
  int shortcut = in;
  if (stride != 1 || in_c != planes) {
    shortcut = b.conv(name + ".downsample.conv", in, planes, ConvGeometry::pointwise().with_stride(stride));
    shortcut = b.batchnorm(name + ".downsample.bn", shortcut);
  }
  return b.relu(b.add(x, shortcut));
}

int resnet_bottleneck(GraphBuilder& b, const std::string& name, int in, int planes, int stride,
                      const ConvGeometry& mode_g) {
  constexpr int kExpansion = 4;
  const int in_c = b.node(in).out_c;
  int x = b.conv(name + ".conv1", in, planes, ConvGeometry::pointwise());
  x = b.batchnorm(name + ".bn1", x);
  x = b.relu(x);
  x = b.conv(name + ".conv2", x, planes, mode_g.with_stride(stride), true);
  x = b.batchnorm(name + ".bn2", x);
  x = b.relu(x);
  x = b.conv(name + ".conv3", x, planes * kExpansion, ConvGeometry::pointwise());
  x = b.batchnorm(name + ".bn3", x);
  int shortcut = in;
  if (stride != 1 || in_c != planes * kExpansion) {
    shortcut = b.conv(name + ".downsample.conv", in, planes * kExpansion,
                      ConvGeometry::pointwise().with_stride(stride));
    shortcut = b.batchnorm(name + ".downsample.bn", shortcut);
  }
  return b.relu(b.add(x, shortcut));
}

void build_resnet(GraphBuilder& b, const ArchSpec& spec, FilterMode mode) {
  const ConvGeometry mode_g = mode_geometry(mode);
  std::vector<int> blocks;
  bool bottleneck = false;
  switch (spec.depth) {
    case 18: blocks = {2, 2, 2, 2}; break;
    case 34: blocks = {3, 4, 6, 3}; break;
    case 50: blocks = {3, 4, 6, 3}; bottleneck = true; break;
    default: throw ParamError("unsupported ResNet depth " + std::to_string(spec.depth));
  }
  int cur = b.conv_bn_relu("conv1", 0, 64, mode_g, true);
  b.tap(cur);
  const int planes[] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    for (int i = 0; i < blocks[static_cast<std::size_t>(stage)]; ++i) {
      const int stride = (stage > 0 && i == 0) ? 2 : 1;
      const std::string name = "layer" + std::to_string(stage + 1) + "." + std::to_string(i);
      cur = bottleneck ? resnet_bottleneck(b, name, cur, planes[stage], stride, mode_g)
                       : resnet_basic_block(b, name, cur, planes[stage], stride, mode_g);
    }
    b.tap(cur);
  }
  cur = b.global_avg_pool(cur);
  b.linear("fc", cur, spec.num_classes);
}

// Pre-activation wide residual block.
int wrn_block(GraphBuilder& b, const std::string& name, int in, int out_c, int stride,
              const ConvGeometry& mode_g) {
  const int in_c = b.node(in).out_c;
  int pre = b.relu(b.batchnorm(name + ".bn1", in));
  int x = b.conv(name + ".conv1", pre, out_c, mode_g.with_stride(stride), true);
  x = b.relu(b.batchnorm(name + ".bn2", x));
  x = b.conv(name + ".conv2", x, out_c, mode_g, true);
  int shortcut = in;
  if (stride != 1 || in_c != out_c) {
    shortcut = b.conv(name + ".shortcut", pre, out_c, ConvGeometry::pointwise().with_stride(stride));
  }
  return b.add(x, shortcut);
}

void build_wrn(GraphBuilder& b, const ArchSpec& spec, FilterMode mode) {
  const ConvGeometry mode_g = mode_geometry(mode);
  const int n = (spec.depth - 4) / 6;
  int cur = b.conv("conv1", 0, 16, mode_g, true);
  b.tap(cur);
  const int widths[] = {16 * spec.widen, 32 * spec.widen, 64 * spec.widen};
  for (int group = 0; group < 3; ++group) {
    for (int i = 0; i < n; ++i) {
      const int stride = (group > 0 && i == 0) ? 2 : 1;
      cur = wrn_block(b, "block" + std::to_string(group + 1) + "." + std::to_string(i), cur,
                      widths[group], stride, mode_g);
    }
    b.tap(cur);
  }
  cur = b.relu(b.batchnorm("bn_final", cur));
  cur = b.global_avg_pool(cur);
  b.linear("fc", cur, spec.num_classes);
}

// tiny-k: k conv-BN-ReLU layers with widths 16,16,32,32,64,64,...; stride 2 where width grows.
void build_tiny(GraphBuilder& b, const ArchSpec& spec, FilterMode mode) {
  const ConvGeometry mode_g = mode_geometry(mode);
  std::vector<int> taps;
  int cur = 0;
  int prev_channels = 0;
  int prev_relu = -1;
  for (int i = 0; i < spec.depth; ++i) {
    const int channels = 16 << std::min(i / 2, 2);
    const int stride = (i > 0 && channels > prev_channels) ? 2 : 1;
    if (prev_relu >= 0 && channels > prev_channels) add_tap_unique(b, taps, prev_relu);
    cur = b.conv_bn_relu("conv" + std::to_string(i), cur, channels, mode_g.with_stride(stride), true);
    if (i == 0) add_tap_unique(b, taps, cur);
    prev_relu = cur;
    prev_channels = channels;
  }
  cur = b.global_avg_pool(cur);
  b.linear("fc", cur, spec.num_classes);
}

Model build_graph(const ArchSpec& spec, FilterMode mode, SurgeryMode surgery, bool shapes_only) {
  spec.validate();
  GraphBuilder b(spec.in_channels, spec.in_h, spec.in_w, shapes_only);
  switch (spec.family) {
    case Family::vgg: build_vgg(b, spec, mode, surgery); break;
    case Family::resnet: build_resnet(b, spec, mode); break;
    case Family::wrn: build_wrn(b, spec, mode); break;
    case Family::tiny: build_tiny(b, spec, mode); break;
  }
  return b.finish(spec, mode, surgery);
}

}  // namespace

ArchSpec ArchSpec::parse(std::string_view id, int num_classes) {
  ArchSpec spec;
  spec.num_classes = num_classes;
  auto fail = [&]() -> ArchSpec {
    throw ParamError("unknown architecture '" + std::string(id) + "'; supported: " + supported_list());
  };
  auto take = [&](std::string_view prefix) {
    if (id.substr(0, prefix.size()) != prefix) return false;
    id.remove_prefix(prefix.size());
    return true;
  };
  const std::string original(id);
  if (take("vgg")) {
    spec.family = Family::vgg;
    if (id.size() > 2 && id.substr(id.size() - 2) == "bn") id.remove_suffix(2);
  } else if (take("resnet")) {
    spec.family = Family::resnet;
  } else if (take("wrn")) {
    spec.family = Family::wrn;
    const auto dash = id.find('-');
    if (dash == std::string_view::npos) return fail();
    const auto widen = parse_int(id.substr(dash + 1));
    if (!widen) return fail();
    spec.widen = *widen;
    id = id.substr(0, dash);
  } else if (take("tiny")) {
    spec.family = Family::tiny;
  } else {
    id = original;
    return fail();
  }
  const auto depth = parse_int(id);
  if (!depth) {
    id = original;
    return fail();
  }
  spec.depth = *depth;
  id = original;
  spec.validate();
  return spec;
}

std::string ArchSpec::id() const {
  switch (family) {
    case Family::vgg: return "vgg" + std::to_string(depth) + "bn";
    case Family::resnet: return "resnet" + std::to_string(depth);
    case Family::wrn: return "wrn" + std::to_string(depth) + "-" + std::to_string(widen);
    case Family::tiny: return "tiny" + std::to_string(depth);
  }
  return "?";
}

void ArchSpec::validate() const {
  const bool known = std::any_of(std::begin(kSupported), std::end(kSupported), [&](const Supported& s) {
    return s.family == family && s.depth == depth && (family != Family::wrn || s.widen == widen);
  });
  if (!known) {
    throw ParamError("unsupported architecture " + id() + "; supported: " + supported_list());
  }
  if (num_classes < 1) throw ParamError("num_classes must be positive");
  if (in_channels < 1 || in_h < 1 || in_w < 1) throw ParamError("input extents must be positive");
}

std::vector<std::string> supported_arch_ids() {
  std::vector<std::string> out;
  for (const Supported& s : kSupported) {
    ArchSpec spec;
    spec.family = s.family;
    spec.depth = s.depth;
    spec.widen = s.widen;
    out.push_back(spec.id());
  }
  return out;
}

std::string to_string(FilterMode m) {
  switch (m) {
    case FilterMode::teacher: return "teacher";
    case FilterMode::row_student: return "row_student";
    case FilterMode::column: return "column";
  }
  return "?";
}

std::string to_string(SurgeryMode m) {
  switch (m) {
    case SurgeryMode::interior: return "interior";
    case SurgeryMode::all_pools: return "all_pools";
    case SurgeryMode::edge_convs: return "edge_convs";
  }
  return "?";
}

FilterMode parse_filter_mode(std::string_view s) {
  if (s == "teacher") return FilterMode::teacher;
  if (s == "row_student" || s == "student" || s == "row") return FilterMode::row_student;
  if (s == "column") return FilterMode::column;
  throw ParamError("unknown filter mode '" + std::string(s) + "' (teacher|row_student|column)");
}

SurgeryMode parse_surgery_mode(std::string_view s) {
  if (s == "interior") return SurgeryMode::interior;
  if (s == "all_pools" || s == "all-pools") return SurgeryMode::all_pools;
  if (s == "edge_convs" || s == "edge-convs") return SurgeryMode::edge_convs;
  throw ParamError("unknown surgery mode '" + std::string(s) + "' (interior|all_pools|edge_convs)");
}

ConvGeometry mode_geometry(FilterMode mode, int n) {
  switch (mode) {
    case FilterMode::teacher: return ConvGeometry::square(n);
    case FilterMode::row_student: return ConvGeometry::row(n);
    case FilterMode::column: return ConvGeometry::column(n);
  }
  return ConvGeometry::square(n);
}

// ---------------------------------------------------------------------------------------------

Parameter& Model::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw MismatchError("model has no parameter '" + std::string(name) + "'");
}

const Parameter& Model::param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw MismatchError("model has no parameter '" + std::string(name) + "'");
}

std::vector<Parameter*> Model::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p.trainable) out.push_back(&p);
  }
  return out;
}

std::vector<TapShape> Model::tap_shapes() const {
  std::vector<TapShape> out;
  for (int t : taps_) {
    const Node& n = nodes_[static_cast<std::size_t>(t)];
    out.push_back({n.out_c, n.out_h, n.out_w});
  }
  return out;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

GraphBuilder::GraphBuilder(int channels, int height, int width, bool shapes_only)
    : shapes_only_(shapes_only) {
  Node in;
  in.kind = OpKind::input;
  in.name = "input";
  in.out_c = channels;
  in.out_h = height;
  in.out_w = width;
  nodes_.push_back(in);
}

int GraphBuilder::push(Node n) {
  for (int i : n.inputs) {
    if (i < 0 || i >= static_cast<int>(nodes_.size())) throw Error("graph input index out of range");
  }
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int GraphBuilder::add_param(const std::string& name, Shape shape, float fill, bool trainable) {
  for (const auto& p : params_) {
    if (p.name == name) throw Error("duplicate parameter name '" + name + "'");
  }
  Parameter p;
  p.name = name;
  p.trainable = trainable;
  if (!shapes_only_) p.value = Tensor(shape, fill);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

int GraphBuilder::conv(const std::string& name, int input, int out_channels, const ConvGeometry& g,
                       bool mode_dependent, bool bias) {
  const Node& in = node(input);
  Node n;
  n.kind = OpKind::conv;
  n.name = name;
  n.inputs = {input};
  n.geom = g;
  n.mode_dependent = mode_dependent;
  n.out_c = out_channels;
  n.out_h = g.out_h(in.out_h);
  n.out_w = g.out_w(in.out_w);
  n.weight = add_param(name + ".weight", Shape{out_channels, in.out_c, g.kernel_h, g.kernel_w}, 0.0f, true);
  if (bias) n.bias = add_param(name + ".bias", Shape{out_channels}, 0.0f, true);
  return push(std::move(n));
}

int GraphBuilder::batchnorm(const std::string& name, int input) {
  const Node& in = node(input);
  Node n;
  n.kind = OpKind::batchnorm;
  n.name = name;
  n.inputs = {input};
  n.out_c = in.out_c;
  n.out_h = in.out_h;
  n.out_w = in.out_w;
  const Shape s{in.out_c};
  n.weight = add_param(name + ".weight", s, 1.0f, true);
  n.bias = add_param(name + ".bias", s, 0.0f, true);
  n.running_mean = add_param(name + ".running_mean", s, 0.0f, false);
  n.running_var = add_param(name + ".running_var", s, 1.0f, false);
  return push(std::move(n));
}

int GraphBuilder::relu(int input) {
  Node n = node(input);
  n.kind = OpKind::relu;
  n.name = "relu" + std::to_string(nodes_.size());
  n.inputs = {input};
  n.mode_dependent = false;
  n.weight = n.bias = n.running_mean = n.running_var = -1;
  return push(std::move(n));
}

int GraphBuilder::max_pool(int input) {
  const Node& in = node(input);
  if (in.out_h % 2 != 0 || in.out_w % 2 != 0) {
    throw ShapeError("max_pool2x2 on odd extents " + std::to_string(in.out_h) + "x" + std::to_string(in.out_w));
  }
  Node n;
  n.kind = OpKind::max_pool;
  n.name = "pool" + std::to_string(nodes_.size());
  n.inputs = {input};
  n.out_c = in.out_c;
  n.out_h = in.out_h / 2;
  n.out_w = in.out_w / 2;
  return push(std::move(n));
}

int GraphBuilder::add(int a, int b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.out_c != nb.out_c || na.out_h != nb.out_h || na.out_w != nb.out_w) {
    throw ShapeError("residual add of mismatched branches " + na.name + " and " + nb.name);
  }
  Node n;
  n.kind = OpKind::add;
  n.name = "add" + std::to_string(nodes_.size());
  n.inputs = {a, b};
  n.out_c = na.out_c;
  n.out_h = na.out_h;
  n.out_w = na.out_w;
  return push(std::move(n));
}

int GraphBuilder::global_avg_pool(int input) {
  Node n;
  n.kind = OpKind::global_avg_pool;
  n.name = "gap";
  n.inputs = {input};
  n.out_c = node(input).out_c;
  n.out_h = 1;
  n.out_w = 1;
  return push(std::move(n));
}

int GraphBuilder::linear(const std::string& name, int input, int out_features) {
  const Node& in = node(input);
  const int features = in.out_c * in.out_h * in.out_w;
  Node n;
  n.kind = OpKind::linear;
  n.name = name;
  n.inputs = {input};
  n.out_c = out_features;
  n.out_h = 1;
  n.out_w = 1;
  n.weight = add_param(name + ".weight", Shape{out_features, features}, 0.0f, true);
  n.bias = add_param(name + ".bias", Shape{out_features}, 0.0f, true);
  return push(std::move(n));
}

int GraphBuilder::conv_bn_relu(const std::string& name, int input, int out_channels,
                               const ConvGeometry& g, bool mode_dependent) {
  int x = conv(name + ".conv", input, out_channels, g, mode_dependent);
  x = batchnorm(name + ".bn", x);
  return relu(x);
}

void GraphBuilder::tap(int node_index) {
  if (node_index <= 0 || node_index >= static_cast<int>(nodes_.size())) throw Error("tap index out of range");
  taps_.push_back(node_index);
}

Model GraphBuilder::finish(const ArchSpec& spec, FilterMode mode, SurgeryMode surgery) {
  Model m;
  m.spec_ = spec;
  m.mode_ = mode;
  m.surgery_ = surgery;
  m.nodes_ = std::move(nodes_);
  m.params_ = std::move(params_);
  m.taps_ = std::move(taps_);
  return m;
}

Model build(const ArchSpec& spec, FilterMode mode, SurgeryMode surgery) {
  Model model = build_graph(spec, mode, surgery, false);
  const auto shapes = model.tap_shapes();
  if (shapes.size() < 2) throw Error(spec.id() + ": fewer than two feature taps");
  for (FilterMode other : {FilterMode::teacher, FilterMode::row_student, FilterMode::column}) {
    if (other == mode) continue;
    const Model sibling = build_graph(spec, other, surgery, true);
    if (sibling.tap_shapes() != shapes || sibling.nodes().size() != model.nodes().size()) {
      throw ShapeError(spec.id() + ": tapped features of " + to_string(mode) + " and " +
                       to_string(other) + " builds differ");
    }
  }
  return model;
}

std::vector<TapShape> tap_points(const Model& model) { return model.tap_shapes(); }

std::int64_t param_count(const Model& model, bool convs_only) {
  std::int64_t total = 0;
  if (convs_only) {
    for (const Node& n : model.nodes()) {
      if (n.kind == OpKind::conv && n.mode_dependent) {
        total += static_cast<std::int64_t>(model.params()[static_cast<std::size_t>(n.weight)].value.size());
      }
    }
    return total;
  }
  for (const Parameter& p : model.params()) {
    if (p.trainable) total += static_cast<std::int64_t>(p.value.size());
  }
  return total;
}

void init_weights(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const Node& n : model.nodes()) {
    switch (n.kind) {
      case OpKind::conv:
      case OpKind::linear: {
        Parameter& w = model.params()[static_cast<std::size_t>(n.weight)];
        const Shape& s = w.value.shape();
        const int fan_in = n.kind == OpKind::conv ? s[1] * s[2] * s[3] : s[1];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (float& v : w.value.data()) v = static_cast<float>(dist(rng));
        if (n.bias >= 0) model.params()[static_cast<std::size_t>(n.bias)].value.fill(0.0f);
        break;
      }
      case OpKind::batchnorm:
        model.params()[static_cast<std::size_t>(n.weight)].value.fill(1.0f);
        model.params()[static_cast<std::size_t>(n.bias)].value.fill(0.0f);
        model.params()[static_cast<std::size_t>(n.running_mean)].value.fill(0.0f);
        model.params()[static_cast<std::size_t>(n.running_var)].value.fill(1.0f);
        break;
      default:
        break;
    }
  }
  model.zero_grad();
}

std::vector<Var> run_graph(Model& model, Tape& tape, Var x, Role role) {
  const auto& nodes = model.nodes();
  const Node& in = nodes.front();
  const Shape& xs = x.value().shape();
  if (xs.rank() != 4 || xs[1] != in.out_c || xs[2] != in.out_h || xs[3] != in.out_w) {
    throw ShapeError(model.spec().id() + ": input must be [N," + std::to_string(in.out_c) + "," +
                     std::to_string(in.out_h) + "," + std::to_string(in.out_w) + "], got " + xs.str());
  }
  auto param_var = [&](int idx) {
    Parameter& p = model.params()[static_cast<std::size_t>(idx)];
    return role == Role::trainee ? tape.parameter(p) : tape.constant_ref(p.value);
  };
  std::vector<Var> out(nodes.size());
  out[0] = x;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    const Var a = out[static_cast<std::size_t>(n.inputs[0])];
    switch (n.kind) {
      case OpKind::input:
        throw Error("input node must be first");
      case OpKind::conv: {
        const Var w = param_var(n.weight);
        if (n.bias >= 0) {
          const Var b = param_var(n.bias);
          out[i] = conv2d(a, w, &b, n.geom);
        } else {
          out[i] = conv2d(a, w, nullptr, n.geom);
        }
        break;
      }
      case OpKind::batchnorm: {
        BnState st{model.params()[static_cast<std::size_t>(n.running_mean)].value,
                   model.params()[static_cast<std::size_t>(n.running_var)].value, model.bn_momentum,
                   model.bn_eps};
        out[i] = batchnorm2d(a, param_var(n.weight), param_var(n.bias), st,
                             role == Role::trainee ? BnMode::train : BnMode::eval);
        break;
      }
      case OpKind::relu: out[i] = relu(a); break;
      case OpKind::max_pool: out[i] = max_pool2x2(a); break;
      case OpKind::add: out[i] = add(a, out[static_cast<std::size_t>(n.inputs[1])]); break;
      case OpKind::global_avg_pool: out[i] = global_avg_pool(a); break;
      case OpKind::linear: {
        const Var flat = a.value().rank() == 2 ? a : flatten(a);
        out[i] = linear(flat, param_var(n.weight), param_var(n.bias));
        break;
      }
    }
  }
  return out;
}

}  // namespace otf::nn
