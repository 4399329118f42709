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

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace otf {

/// Extents of a rank <= 4 tensor. NCHW for feature maps, [Cout,Cin,kh,kw] for conv weights.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int> extents);
  explicit Shape(std::span<const int> extents);

  int rank() const { return rank_; }
  int operator[](int axis) const { return extents_[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const;
  std::span<const int> extents() const { return {extents_.data(), static_cast<std::size_t>(rank_)}; }

  bool operator==(const Shape& other) const;
  bool operator!=(const Shape& other) const { return !(*this == other); }
  std::string str() const;

 private:
  std::array<int, kMaxRank> extents_{};
  int rank_ = 0;
};

/// Dense float32 array in row-major order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int dim(int axis) const { return shape_[axis]; }
  int rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// NCHW element access; only valid on rank-4 tensors.
  float& at(int n, int c, int h, int w);
  float at(int n, int c, int h, int w) const;

  void fill(float value);
  bool all_finite() const;
  /// Throws otf::Error naming `what` if any element is NaN or Inf.
  void check_finite(const std::string& what) const;

  bool bitwise_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Raises ShapeError("<what>: expected ..., got ...") unless the shapes are equal.
void expect_shape(const Tensor& t, const Shape& expected, const std::string& what);

}  // namespace otf
