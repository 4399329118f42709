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

// Stand-in for CIFAR-10 when the real binaries are not available: procedurally generated
// 32x32 RGB images written in the CIFAR-10 binary record layout, so they go through the same
// import path as the real files.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "otf/data.hpp"

namespace synth {

struct Style {
  double tint = 14.0;         // class colour amplitude
  double tint_jitter = 18.0;  // per-image colour shift (std)
  double grating = 24.0;      // stripe amplitude
  double noise = 55.0;        // per-pixel noise (std)
};

/// `per_class` records of each of `classes` classes, interleaved by class. Each record is one label
/// byte followed by 3072 channel-major pixel bytes.
std::vector<std::uint8_t> cifar10_records(int per_class, int classes, std::uint64_t seed, const Style& style = {});

struct Source {
  std::vector<std::filesystem::path> train;
  std::vector<std::filesystem::path> test;
  bool real = false;
  std::string describe() const;
};

/// Real CIFAR-10 from $OTF_CIFAR10_DIR (data_batch_1..5.bin, test_batch.bin) when set, otherwise a
/// synthetic 10-class set written under `scratch`.
Source cifar10_source(const std::filesystem::path& scratch, int train_per_class, int test_per_class,
                      std::uint64_t seed, const Style& style = {});

/// Small in-memory container: class k is a colour (hue k/classes) plus noise, so every filter
/// mode can separate it. Normalization is computed from the container itself.
otf::data::Container colour_container(int per_class, int classes, int side, std::uint64_t seed,
                                      double noise = 30.0);

}  // namespace synth
