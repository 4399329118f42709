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
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "otf/tensor.hpp"

namespace otf::data {

enum class DatasetKind { cifar10, cifar100, svhn, custom };

DatasetKind parse_dataset_kind(std::string_view s);
std::string to_string(DatasetKind k);

/// In-memory form of an OTFD file.
///
/// Layout (little-endian, packed):
///   "OTFD" | version u32 | count u32 | channels u8 | height u16 | width u16 |
///   num_classes u16 | mean f32[channels] | std f32[channels] |
///   count x (label u16 | channels*height*width pixel bytes, channel-major)
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  std::vector<float> mean;
  std::vector<float> std;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  /// Throws FormatError unless labels, pixel count and std are consistent.
  void validate() const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);
void write_container(const Container& c, const std::filesystem::path& path);
/// For DatasetKind::svhn the record count must be 73 257 (train) or 26 032 (test).
Container read_container(const std::filesystem::path& path, DatasetKind kind = DatasetKind::custom);

/// Per-channel mean and population std of pixels scaled to [0,1].
void compute_normalization(Container& c);

enum class CifarVariant { cifar10, cifar100 };

/// Parses raw CIFAR binary records (3073-byte CIFAR-10 records, or 3074-byte CIFAR-100
/// records whose second byte is the fine label). `source` names the input in errors.
Container decode_cifar(CifarVariant variant, std::span<const std::uint8_t> bytes,
                       const std::string& source = "<memory>");

struct CifarSplit {
  Container train;
  Container test;
};

/// Reads and concatenates the raw files; mean/std are computed on the training split and
/// copied into the test header.
CifarSplit import_cifar(CifarVariant variant, std::span<const std::filesystem::path> train_files,
                        std::span<const std::filesystem::path> test_files);

/// Keeps records whose label is in `classes` (relabelled to their position in that list),
/// at most `per_class_limit` per class (all when < 0), in original order. The
/// normalization constants are carried over unchanged.
Container subset(const Container& c, std::span<const int> classes, int per_class_limit = -1);

struct AugmentPolicy {
  bool enabled = false;
  int pad = 4;
  int crop_h = 32;
  int crop_w = 32;
  double flip_prob = 0.5;

  /// Enabled for CIFAR, disabled for SVHN and custom data.
  static AugmentPolicy for_kind(DatasetKind kind);
};

struct AugmentDraw {
  int offset_y = 0;
  int offset_x = 0;
  bool flip = false;
};

/// Crop offsets uniform on [0, 2*pad]^2, flip with policy.flip_prob.
AugmentDraw draw_augment(const AugmentPolicy& policy, std::mt19937_64& rng);

/// Zero-pads by policy.pad, crops crop_h x crop_w at the drawn offset, optionally mirrors
/// horizontally. Identity when the policy is disabled.
std::vector<std::uint8_t> augment(std::span<const std::uint8_t> image, int channels, int height,
                                  int width, const AugmentPolicy& policy, const AugmentDraw& draw);

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::uint32_t> indices;
};

/// One epoch of mini-batches. The visiting order is a seeded permutation (or the identity
/// when `shuffle` is false); the final partial batch is kept.
class BatchStream {
 public:
  BatchStream(const Container& c, int batch_size, std::uint64_t seed, int epoch, bool normalize,
              AugmentPolicy policy = {}, bool shuffle = true);

  bool next(Batch& out);
  std::size_t num_batches() const;
  const std::vector<std::uint32_t>& order() const { return order_; }

 private:
  const Container* c_;
  int batch_size_;
  bool normalize_;
  AugmentPolicy policy_;
  std::mt19937_64 aug_rng_;
  std::vector<std::uint32_t> order_;
  std::size_t pos_ = 0;
};

/// Normalises raw channel-major bytes of one image into `dst` (c*h*w floats).
void normalize_image(const Container& c, std::span<const std::uint8_t> image, float* dst,
                     bool normalize);

}  // namespace otf::data
