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
#include <string>
#include <vector>

#include "otf/autograd.hpp"
#include "otf/tensor.hpp"

namespace otf {

/// Kernel, zero padding and stride of a 2-D cross-correlation.
struct ConvGeometry {
  int kernel_h = 3;
  int kernel_w = 3;
  int pad_h = 1;
  int pad_w = 1;
  int stride_h = 1;
  int stride_w = 1;

  /// N x N kernel with "same" padding.
  static ConvGeometry square(int n = 3);
  /// 1 x N kernel, pad (0, N/2). Touches a single input row.
  static ConvGeometry row(int n = 3);
  /// N x 1 kernel, pad (N/2, 0).
  static ConvGeometry column(int n = 3);
  static ConvGeometry pointwise();

  ConvGeometry with_stride(int s) const;
  bool row_streamable() const { return kernel_h == 1 && pad_h == 0; }

  /// Output extents for an input of in_h x in_w; throws ShapeError if either is < 1.
  int out_h(int in_h) const;
  int out_w(int in_w) const;

  bool operator==(const ConvGeometry&) const = default;
  std::string str() const;
};

enum class BnMode { train, eval };

struct BnState {
  Tensor& running_mean;
  Tensor& running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

// Differentiable operations. Each records onto the tape of its first argument.

/// x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
Var conv2d(Var x, Var w, const Var* bias, const ConvGeometry& g);
/// Train mode normalises with biased batch statistics and updates the running statistics
/// (unbiased variance, exponential momentum). Eval mode uses the running statistics.
Var batchnorm2d(Var x, Var gamma, Var beta, BnState state, BnMode mode);
Var relu(Var x);
/// 2x2 window, stride 2. Gradient goes to the first maximum in row-major window order.
Var max_pool2x2(Var x);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);
/// x [N,F], w [K,F], b [K] -> [N,K]
Var linear(Var x, Var w, Var b);
/// [N,...] -> [N, prod(...)]
Var flatten(Var x);
Var add(Var a, Var b);
/// Elementwise arithmetic mean of equally shaped inputs.
Var mean_of(std::span<const Var> xs);
/// log((softmax(a) + softmax(b)) / 2) row-wise on [N,K] logits.
Var log_mean_softmax(Var a, Var b);
/// Returns a tape constant holding a copy of x's value; no gradient flows through it.
Var detach(Var x);

/// Sum over all elements of a * b; single-element result.
Var dot(Var a, Var b);
/// sum_i coeffs[i] * terms[i] over single-element terms, evaluated in double.
Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs);

// Losses. All return single-element tensors of shape [1].

/// Batch mean of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);
/// scale * batch-mean KL(softmax(teacher/tau) || softmax(student/tau)); teacher side detached.
Var kl_div_temperature(Var teacher_logits, Var student_logits, double tau, double scale);
/// Mean over elements of (target - pred)^2; target side detached.
Var mse(Var target, Var pred);

// Plain numerics.

/// Row-wise softmax(l / tau) of an [N,K] tensor.
Tensor softmax_temperature(const Tensor& logits, double tau);
/// Index of the largest value in each row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace otf
