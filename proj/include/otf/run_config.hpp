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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "otf/data.hpp"
#include "otf/distill.hpp"
#include "otf/model.hpp"

namespace otf::app {

enum class AugmentSetting { automatic, on, off };

/// Line-oriented `key = value` run description. '#' starts a comment; blank lines are ignored.
/// Unknown keys and invalid values raise ConfigError.
struct RunConfig {
  std::string arch = "tiny4";
  nn::FilterMode filter_mode = nn::FilterMode::teacher;
  nn::SurgeryMode surgery_mode = nn::SurgeryMode::interior;
  data::DatasetKind dataset = data::DatasetKind::custom;
  std::string train_data;
  std::string test_data;
  /// Restrict both splits to these classes (relabelled 0..k-1); empty keeps all.
  std::vector<int> classes;
  int train_per_class = -1;
  int test_per_class = -1;
  AugmentSetting augment = AugmentSetting::automatic;
  std::optional<std::uint64_t> seed;
  std::string teacher_checkpoint;
  std::string pacemaker_checkpoint;
  std::string init_checkpoint;
  std::string checkpoint;
  std::string out_dir = "runs";
  /// When set, milestones follow the 200-epoch schedule scaled to `epochs`.
  bool scale_milestones = false;
  kd::DistillConfig distill;

  /// Applies one key; throws ConfigError naming the key.
  void set(std::string_view key, std::string_view value);
  /// Cross-field checks (DistillConfig invariants, arch id, class list).
  void validate() const;
  /// Effective DistillConfig with the milestone scaling applied.
  kd::DistillConfig resolved_distill() const;
  /// All keys in canonical order; parse(serialize()) reproduces the config.
  std::string serialize() const;

  static RunConfig parse(std::string_view text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();
};

}  // namespace otf::app
