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
#include <fstream>
#include <iosfwd>
#include <string>
#include <vector>

#include "otf/distill.hpp"

namespace otf::app {

/// Runs `otf <args...>` (args exclude the program name). Exit codes: 0 success, 1 runtime
/// failure, 2 invalid configuration or usage. Failures print one diagnostic line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Creates `<base>/<command>-s<seed>-<UTC timestamp>`, adding "-1", "-2", ... when that name is
/// taken. An existing directory is never reused.
std::filesystem::path make_run_dir(const std::filesystem::path& base, const std::string& command, std::uint64_t seed);

/// Per-seed results of a repeated command.
struct RepeatSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;
  double mean = 0.0;
  /// values[i] - mean
  std::vector<double> deviations;
};

RepeatSummary summarize_repeats(std::vector<std::uint64_t> seeds, std::vector<double> values);

/// Tab-separated epoch log, one line per epoch, flushed as it is written:
///   phase epoch lr l_fkd l_lkd l_ce total test_acc pm_mode
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void append(int phase, const kd::EpochRecord& rec, const std::string& pm_mode);

 private:
  std::ofstream out_;
};

}  // namespace otf::app
