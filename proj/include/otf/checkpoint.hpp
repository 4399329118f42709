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
#include <span>
#include <string>
#include <vector>

#include "otf/model.hpp"

namespace otf::app {

/// PMKD checkpoint, little-endian:
///   "PMKD" | version u32 | tensor count u32 |
///   per tensor: name length u16 | name bytes | dtype u8 (0 = f32) | rank u8 | dims u32[rank] | f32 payload |
///   FNV-1a 64 of every preceding byte (u64)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
/// Magic is checked first (FormatError), then the trailing checksum (ChecksumError), then structure.
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Every parameter, BN running statistics included, named `prefix + param.name`.
std::vector<NamedTensor> model_tensors(const nn::Model& model, const std::string& prefix = "");
/// Copies tensors named `prefix + param.name` into the model. Missing names and shape differences raise
/// MismatchError naming the first offending parameter in model order; leftover tensors are rejected too
/// when `prefix` is empty.
void load_tensors(nn::Model& model, std::span<const NamedTensor> tensors, const std::string& prefix = "");

void write_checkpoint(std::span<const NamedTensor> tensors, const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const nn::Model& model, const std::filesystem::path& path);
/// Builds (spec, mode, surgery) and fills it from the file.
nn::Model load_checkpoint(const std::filesystem::path& path, const nn::ArchSpec& spec, nn::FilterMode mode,
                          nn::SurgeryMode surgery = nn::SurgeryMode::interior);

/// Trailing checksum stored in a checkpoint file.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace otf::app
