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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "otf/error.hpp"
#include "otf/ops.hpp"
#include "otf/stream.hpp"
#include "reference.hpp"

using namespace otf;
using namespace otf::stream;
using nn::GraphBuilder;

namespace {

constexpr double kFold = 1e-5;
constexpr double kStream = 1e-4;

Tensor randn(Shape s, std::mt19937_64& rng, float sd = 1.0f) {
  Tensor t(std::move(s));
  std::normal_distribution<float> nd(0.0f, sd);
  for (float& v : t.data()) v = nd(rng);
  return t;
}

Tensor filled(Shape s, float v) {
  Tensor t(std::move(s));
  t.fill(v);
  return t;
}

/// Gives every BN layer non-trivial running statistics and affine parameters.
void randomise_bn(nn::Model& m, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, 0.5f);
  std::uniform_real_distribution<float> var(0.3f, 2.0f);
  for (auto& p : m.params()) {
    if (p.value.rank() != 1) continue;
    const bool is_var = p.name.ends_with("running_var");
    for (float& v : p.value.data()) v = is_var ? var(rng) : (p.name.ends_with(".weight") ? 1.0f + nd(rng) : nd(rng));
  }
}

/// Row-streamable graph: 1..3 blocks of a 1xN or 1x1 conv (vertical stride 1 or 2), optional BN,
/// ReLU, optional pointwise residual branch; then global pool and a linear head.
nn::Model random_streamable(std::mt19937_64& rng, int classes = 4) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int c = pick(1, 3), h = pick(3, 12), w = pick(3, 12);
  GraphBuilder b(c, h, w);
  int cur = 0;
  const int blocks = pick(1, 3);
  for (int i = 0; i < blocks; ++i) {
    const std::string name = "s" + std::to_string(i);
    ConvGeometry g = pick(0, 3) == 0 ? ConvGeometry::pointwise() : ConvGeometry::row(pick(0, 1) ? 3 : 5);
    if (pick(0, 2) == 0) g = g.with_stride(2);
    cur = b.conv(name + ".conv", cur, pick(1, 5), g, false, pick(0, 1) == 1);
    if (pick(0, 2) != 0) cur = b.batchnorm(name + ".bn", cur);
    if (pick(0, 3) == 0) {
      const int branch = b.conv(name + ".branch", cur, b.node(cur).out_c, ConvGeometry::row(3), false, true);
      cur = b.add(cur, branch);
    }
    cur = b.relu(cur);
    if (i == 0) b.tap(cur);
  }
  cur = b.global_avg_pool(cur);
  b.linear("fc", cur, classes);
  nn::ArchSpec spec;
  spec.num_classes = classes;
  spec.in_channels = c;
  spec.in_h = h;
  spec.in_w = w;
  auto m = b.finish(spec, nn::FilterMode::row_student, nn::SurgeryMode::interior);
  nn::init_weights(m, rng());
  randomise_bn(m, rng);
  return m;
}

std::vector<float> batch_logits(nn::Model& m, const Tensor& image) {
  Tape t;
  auto outs = nn::run_graph(m, t, t.constant(image), nn::Role::frozen);
  const auto d = outs.back().value().data();
  return {d.begin(), d.end()};
}

int argmax(const std::vector<float>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Single-channel model: one conv with the given kernel row, then pool + 1-way linear.
nn::Model single_conv(int h, int w, std::vector<float> kernel, ConvGeometry g) {
  GraphBuilder b(1, h, w);
  const int c = b.conv("c", 0, 1, g, false, false);
  b.tap(c);
  b.linear("fc", b.global_avg_pool(c), 1);
  nn::ArchSpec spec;
  spec.num_classes = 1;
  spec.in_channels = 1;
  spec.in_h = h;
  spec.in_w = w;
  auto m = b.finish(spec, nn::FilterMode::row_student, nn::SurgeryMode::interior);
  nn::init_weights(m, 1);
  std::copy(kernel.begin(), kernel.end(), m.param("c.weight").value.data().begin());
  return m;
}

}  // namespace

TEST_CASE("fold_batchnorm with identity statistics leaves the layer unchanged") {
  std::mt19937_64 rng(1);
  const auto w = randn(Shape{4, 3, 1, 3}, rng);
  const auto bias = randn(Shape{4}, rng);
  const auto f = fold_batchnorm(w, &bias, ConvGeometry::row(3), filled(Shape{4}, 1.0f), filled(Shape{4}, 0.0f),
                                filled(Shape{4}, 0.0f), filled(Shape{4}, 1.0f), 0.0);
  CHECK(f.weight.bitwise_equal(w));
  CHECK(std::equal(f.bias.begin(), f.bias.end(), bias.data().begin(), bias.data().end()));
  CHECK(f.geom == ConvGeometry::row(3));

  const auto nobias = fold_batchnorm(w, nullptr, ConvGeometry::row(3), filled(Shape{4}, 1.0f), filled(Shape{4}, 0.0f),
                                     filled(Shape{4}, 0.0f), filled(Shape{4}, 1.0f), 0.0);
  CHECK(nobias.bias == std::vector<float>(4, 0.0f));
}

TEST_CASE("fold_batchnorm: beta is a pure bias shift") {
  std::mt19937_64 rng(2);
  const auto w = randn(Shape{3, 2, 1, 3}, rng);
  const auto beta = randn(Shape{3}, rng);
  const auto f = fold_batchnorm(w, nullptr, ConvGeometry::row(3), filled(Shape{3}, 1.0f), beta,
                                filled(Shape{3}, 0.0f), filled(Shape{3}, 1.0f), 0.0);
  CHECK(f.weight.bitwise_equal(w));
  CHECK(std::equal(f.bias.begin(), f.bias.end(), beta.data().begin(), beta.data().end()));
}

TEST_CASE("folded conv equals conv followed by eval BN") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int cin = 1 + trial % 3, cout = 2 + trial % 4;
    const auto g = trial % 2 ? ConvGeometry::row(3) : ConvGeometry::row(5).with_stride(2);
    const auto w = randn(Shape{cout, cin, 1, g.kernel_w}, rng);
    const auto bias = randn(Shape{cout}, rng);
    const auto gamma = randn(Shape{cout}, rng);
    const auto beta = randn(Shape{cout}, rng);
    const auto mean = randn(Shape{cout}, rng);
    auto var = randn(Shape{cout}, rng);
    for (float& v : var.data()) v = 0.2f + v * v;
    const double eps = 1e-5;
    const auto f = fold_batchnorm(w, &bias, g, gamma, beta, mean, var, eps);

    const auto x = ref::from_tensor(randn(Shape{2, cin, 5, 9}, rng));
    auto dbl = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
    auto conv = ref::conv2d(x, dbl(w), cout, dbl(bias), g);
    for (int n = 0; n < conv.n; ++n) {
      for (int c = 0; c < cout; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const double s = gamma.data()[ci] / std::sqrt(var.data()[ci] + eps);
        for (int y = 0; y < conv.h; ++y) {
          for (int xx = 0; xx < conv.w; ++xx) {
            double& v = conv.at(n, c, y, xx);
            v = (v - mean.data()[ci]) * s + beta.data()[ci];
          }
        }
      }
    }
    const std::vector<double> fb(f.bias.begin(), f.bias.end());
    const auto folded = ref::conv2d(x, dbl(f.weight), cout, fb, f.geom);
    double worst = 0.0;
    for (std::size_t i = 0; i < conv.v.size(); ++i) worst = std::max(worst, std::abs(conv.v[i] - folded.v[i]));
    CHECK(worst < kFold);
  }
}

TEST_CASE("fold_batchnorm rejects channel mismatches") {
  std::mt19937_64 rng(4);
  const auto w = randn(Shape{4, 3, 1, 3}, rng);
  CHECK_THROWS_AS(fold_batchnorm(w, nullptr, ConvGeometry::row(3), filled(Shape{3}, 1.0f), filled(Shape{4}, 0.0f),
                                 filled(Shape{4}, 0.0f), filled(Shape{4}, 1.0f), 1e-5),
                  ShapeError);
}

TEST_CASE("plan_stream accepts row students and rejects the rest, naming the layer") {
  const auto spec = nn::ArchSpec::parse("tiny4");
  CHECK_NOTHROW(plan_stream(nn::build(spec, nn::FilterMode::row_student)));
  for (auto mode : {nn::FilterMode::teacher, nn::FilterMode::column}) {
    try {
      plan_stream(nn::build(spec, mode));
      FAIL("expected StreamError");
    } catch (const StreamError& e) {
      CHECK(std::string(e.what()).find("conv0.conv") != std::string::npos);
    }
  }
  // Interior surgery keeps two max-pools in VGG; replacing all of them makes it streamable.
  const auto vgg = nn::ArchSpec::parse("vgg13bn");
  try {
    plan_stream(nn::build(vgg, nn::FilterMode::row_student));
    FAIL("expected StreamError");
  } catch (const StreamError& e) {
    CHECK(std::string(e.what()).find("max-pool") != std::string::npos);
  }
  CHECK_NOTHROW(plan_stream(nn::build(vgg, nn::FilterMode::row_student, nn::SurgeryMode::all_pools)));
  CHECK_NOTHROW(plan_stream(nn::build(nn::ArchSpec::parse("resnet18"), nn::FilterMode::row_student)));
}

TEST_CASE("tiny4 memory budget by hand") {
  const auto plan = plan_stream(nn::build(nn::ArchSpec::parse("tiny4"), nn::FilterMode::row_student));
  // conv0, conv1: 16 channels x 32 wide; conv2 (stride 2), conv3: 32 channels x 16 wide.
  CHECK(plan.memory_budget == 16 * 32 + 16 * 32 + 32 * 16 + 32 * 16);
  CHECK(plan.layers.size() == 4);
  CHECK(plan.layers[2].stride_h == 2);
  StreamState s(plan);
  CHECK(s.live_floats() == plan.memory_budget);
}

TEST_CASE("kernel [1,1,1] on row [1,2,3] emits [3,6,5]") {
  auto m = single_conv(1, 3, {1.0f, 1.0f, 1.0f}, ConvGeometry::row(3));
  const auto plan = plan_stream(m);
  StreamState s(plan);
  std::vector<float> seen;
  s.set_observer([&](int layer, int, std::span<const float> v) {
    if (layer == 0) seen.assign(v.begin(), v.end());
  });
  const std::vector<float> row{1.0f, 2.0f, 3.0f};
  CHECK(s.push_row(row));
  CHECK(seen == std::vector<float>{3.0f, 6.0f, 5.0f});
}

TEST_CASE("identity kernel streams the input through") {
  std::mt19937_64 rng(5);
  auto m = single_conv(6, 7, {0.0f, 1.0f, 0.0f}, ConvGeometry::row(3));
  const auto plan = plan_stream(m);
  StreamState s(plan);
  std::vector<std::vector<float>> out;
  s.set_observer([&](int layer, int, std::span<const float> v) {
    if (layer == 0) out.emplace_back(v.begin(), v.end());
  });
  const auto img = randn(Shape{1, 6, 7}, rng);
  for (int y = 0; y < 6; ++y) {
    const std::span<const float> row(img.data().data() + y * 7, 7);
    s.push_row(row);
    REQUIRE(out.size() == static_cast<std::size_t>(y + 1));
    CHECK(std::equal(row.begin(), row.end(), out.back().begin()));
  }
}

TEST_CASE("vertical stride consumes every other row") {
  auto m = single_conv(9, 4, {0.0f, 1.0f, 0.0f}, ConvGeometry::row(3).with_stride(2));
  const auto plan = plan_stream(m);
  StreamState s(plan);
  std::vector<int> rows;
  s.set_observer([&](int layer, int row, std::span<const float>) {
    if (layer == 0) rows.push_back(row);
  });
  std::vector<int> emitted_after;
  for (int y = 0; y < 9; ++y) {
    s.push_row(std::vector<float>(4, static_cast<float>(y)));
    emitted_after.push_back(s.rows_emitted(0));
  }
  CHECK(emitted_after == std::vector<int>{1, 1, 2, 2, 3, 3, 4, 4, 5});
  CHECK(rows == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("last conv emits ceil(H / product of strides) rows") {
  for (int h = 1; h <= 13; ++h) {
    GraphBuilder b(2, h, 5);
    int cur = b.conv("a", 0, 3, ConvGeometry::row(3).with_stride(2), false, false);
    cur = b.relu(cur);
    cur = b.conv("b", cur, 3, ConvGeometry::row(3), false, false);
    cur = b.conv("c", cur, 2, ConvGeometry::pointwise().with_stride(2), false, true);
    b.tap(cur);
    b.linear("fc", b.global_avg_pool(cur), 2);
    nn::ArchSpec spec;
    spec.num_classes = 2;
    spec.in_channels = 2;
    spec.in_h = h;
    spec.in_w = 5;
    auto m = b.finish(spec, nn::FilterMode::row_student, nn::SurgeryMode::interior);
    nn::init_weights(m, 3);
    const auto plan = plan_stream(m);
    StreamState s(plan);
    for (int y = 0; y < h; ++y) s.push_row(std::vector<float>(10, 0.5f));
    CHECK(s.done());
    CHECK(s.rows_emitted(static_cast<int>(plan.layers.size()) - 1) == (h + 3) / 4);
  }
}

TEST_CASE("zero image and zero weights give exactly zero difference") {
  auto m = nn::build(nn::ArchSpec::parse("tiny4"), nn::FilterMode::row_student);
  nn::init_weights(m, 1);
  for (auto& p : m.params()) {
    if (!p.name.ends_with("running_var") && !p.name.ends_with("bn.weight")) p.value.fill(0.0f);
  }
  const Tensor img(Shape{3, 32, 32});
  CHECK(equivalence_check(m, img) == 0.0);
}

TEST_CASE("streaming equals batch inference on random streamable models") {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    auto m = random_streamable(rng);
    const auto& sp = m.spec();
    const auto img = randn(Shape{1, sp.in_channels, sp.in_h, sp.in_w}, rng);
    const auto plan = plan_stream(m);
    const auto streamed = stream_infer(plan, img);
    const auto batch = batch_logits(m, img);
    REQUIRE(streamed.size() == batch.size());
    double d = 0.0;
    for (std::size_t k = 0; k < batch.size(); ++k) d = std::max(d, std::abs(double(streamed[k]) - batch[k]));
    CHECK(d == doctest::Approx(equivalence_check(m, img)).epsilon(1e-12));
    worst = std::max(worst, d);
    agree += argmax(streamed) == argmax(batch);
  }
  CHECK(worst < kStream);
  CHECK(agree == 100);
}

TEST_CASE("streaming equals batch inference on the tiny students") {
  std::mt19937_64 rng(7);
  for (const char* id : {"tiny4", "tiny6", "tiny8"}) {
    CAPTURE(id);
    auto m = nn::build(nn::ArchSpec::parse(id), nn::FilterMode::row_student);
    nn::init_weights(m, 11);
    randomise_bn(m, rng);
    const auto img = randn(Shape{3, 32, 32}, rng);
    CHECK(equivalence_check(m, img) < kStream);
  }
}

TEST_CASE("emitted rows are causal: they match batch inference on the h-row prefix") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = random_streamable(rng);
    const auto& sp = m.spec();
    const auto img = randn(Shape{1, sp.in_channels, sp.in_h, sp.in_w}, rng);
    const auto plan = plan_stream(m);
    const auto params = ref::params_as_double(m);
    const auto full = ref::from_tensor(img);
    StreamState s(plan);
    // rows[layer][row] = values as emitted.
    std::vector<std::vector<std::vector<float>>> rows(plan.layers.size());
    s.set_observer([&](int layer, int row, std::span<const float> v) {
      auto& r = rows[static_cast<std::size_t>(layer)];
      CHECK(row == static_cast<int>(r.size()));
      r.emplace_back(v.begin(), v.end());
    });
    for (int h = 1; h <= sp.in_h; ++h) {
      const std::span<const float> row(img.data().data(), img.size());
      std::vector<float> line;
      for (int c = 0; c < sp.in_channels; ++c) {
        const auto off = static_cast<std::size_t>((c * sp.in_h + h - 1) * sp.in_w);
        line.insert(line.end(), row.begin() + static_cast<long>(off), row.begin() + static_cast<long>(off + sp.in_w));
      }
      s.push_row(line);

      ref::Map crop(1, sp.in_channels, h, sp.in_w);
      for (int c = 0; c < sp.in_channels; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < sp.in_w; ++x) crop.at(0, c, y, x) = full.at(0, c, y, x);
      const auto nodes = ref::forward_nodes(m, params, crop, false);
      for (std::size_t li = 0; li < plan.layers.size(); ++li) {
        const auto& L = plan.layers[li];
        const auto& ref_out = nodes[static_cast<std::size_t>(L.graph_node)];
        REQUIRE(static_cast<int>(rows[li].size()) == ref_out.h);
        for (int y = 0; y < ref_out.h; ++y) {
          for (int c = 0; c < ref_out.c; ++c) {
            for (int x = 0; x < ref_out.w; ++x) {
              CHECK(std::abs(rows[li][static_cast<std::size_t>(y)][static_cast<std::size_t>(c * ref_out.w + x)] -
                             ref_out.at(0, c, y, x)) < kStream);
            }
          }
        }
      }
    }
    CHECK(s.done());
  }
}

TEST_CASE("peak streaming memory is the sum of one row per layer") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 20; ++i) {
    auto m = random_streamable(rng);
    const auto plan = plan_stream(m);
    std::size_t hand = 0;
    for (const auto& L : plan.layers) hand += static_cast<std::size_t>(L.out_w) * L.out_c;
    // Independent of the plan: every row-buffered node's width x channels from the graph itself.
    std::size_t from_graph = 0;
    for (const auto& L : plan.layers) {
      const auto& nd = m.nodes()[static_cast<std::size_t>(L.graph_node)];
      from_graph += static_cast<std::size_t>(nd.out_w) * nd.out_c;
    }
    CHECK(plan.memory_budget == hand);
    CHECK(plan.memory_budget == from_graph);
    const auto& sp = m.spec();
    StreamState s(plan);
    const auto img = randn(Shape{sp.in_channels, sp.in_h, sp.in_w}, rng);
    (void)stream_infer(plan, img);
    std::vector<float> row(static_cast<std::size_t>(sp.in_channels * sp.in_w), 0.25f);
    for (int y = 0; y < sp.in_h; ++y) {
      s.push_row(row);
      CHECK(s.live_floats() == plan.memory_budget);
    }
    CHECK(s.peak_floats() == plan.memory_budget);
  }
}

TEST_CASE("stream errors") {
  auto m = nn::build(nn::ArchSpec::parse("tiny4"), nn::FilterMode::row_student);
  nn::init_weights(m, 2);
  const auto plan = plan_stream(m);
  StreamState s(plan);
  CHECK_THROWS_AS(s.push_row(std::vector<float>(95)), StreamError);
  CHECK_THROWS_AS((void)s.logits(), StreamError);
  for (int y = 0; y < 31; ++y) CHECK_FALSE(s.push_row(std::vector<float>(96, 0.1f)));
  CHECK(s.push_row(std::vector<float>(96, 0.1f)));
  CHECK(s.logits().size() == 10);
  CHECK_THROWS_AS(s.push_row(std::vector<float>(96, 0.1f)), StreamError);
  CHECK_THROWS_AS(stream_infer(plan, Tensor(Shape{3, 16, 16})), ShapeError);
}

TEST_CASE("byte rows are normalised before streaming") {
  auto m = nn::build(nn::ArchSpec::parse("tiny4"), nn::FilterMode::row_student);
  nn::init_weights(m, 3);
  const auto plan = plan_stream(m);
  const std::vector<float> mean{0.4f, 0.5f, 0.6f}, sd{0.2f, 0.25f, 0.3f};
  std::mt19937_64 rng(10);
  StreamState a(plan), b(plan);
  for (int y = 0; y < 32; ++y) {
    std::vector<std::uint8_t> bytes(96);
    std::vector<float> norm(96);
    for (std::size_t i = 0; i < 96; ++i) {
      bytes[i] = static_cast<std::uint8_t>(rng());
      const std::size_t c = i / 32;
      norm[i] = (bytes[i] / 255.0f - mean[c]) / sd[c];
    }
    a.push_row_bytes(bytes, mean, sd);
    b.push_row(norm);
  }
  for (std::size_t k = 0; k < 10; ++k) CHECK(a.logits()[k] == doctest::Approx(b.logits()[k]).epsilon(1e-5));
  StreamState c(plan);
  CHECK_THROWS_AS(c.push_row_bytes(std::vector<std::uint8_t>(96), std::vector<float>{0.f}, std::vector<float>{1.f}),
                  StreamError);
}
