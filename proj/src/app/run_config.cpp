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

#include "otf/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "otf/error.hpp"

namespace otf::app {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, const std::string& why) {
  throw ConfigError("config key '" + std::string(key) + "': invalid value '" + std::string(value) + "' (" + why + ")");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

long long to_int(std::string_view key, std::string_view v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected an integer");
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a non-negative integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad(key, v, "expected true/false");
}

std::vector<int> to_int_list(std::string_view key, std::string_view v) {
  std::vector<int> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto item = trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    out.push_back(static_cast<int>(to_int(key, item)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string to_string(AugmentSetting a) {
  switch (a) {
    case AugmentSetting::automatic: return "auto";
    case AugmentSetting::on: return "on";
    case AugmentSetting::off: return "off";
  }
  return "?";
}

// Wraps enum parsers so their errors surface as ConfigError.
template <class F>
auto parse_enum(std::string_view key, std::string_view v, F&& f) {
  try {
    return f(v);
  } catch (const Error& e) {
    bad(key, v, e.what());
  }
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  return {"arch",        "filter_mode",      "surgery_mode",     "dataset",         "train_data",
          "test_data",   "classes",          "train_per_class",  "test_per_class",  "augment",
          "seed",        "teacher_checkpoint", "pacemaker_checkpoint", "init_checkpoint", "checkpoint",
          "out_dir",     "tau",              "alpha",            "rho",             "epochs",
          "batch_size",  "eval_batch_size",  "base_lr",          "milestones",      "lr_factor",
          "momentum",    "weight_decay",     "tau_square_scaling", "pacemaker_mode", "ensemble_combine",
          "phase1_training", "phase1_feature_loss", "phase3_init", "normalize"};
}

void RunConfig::set(std::string_view key, std::string_view raw) {
  const std::string_view v = trim(raw);
  kd::DistillConfig& d = distill;
  if (key == "arch") {
    parse_enum(key, v, [](std::string_view s) { return nn::ArchSpec::parse(s); });
    arch = std::string(v);
  } else if (key == "filter_mode") {
    filter_mode = parse_enum(key, v, nn::parse_filter_mode);
  } else if (key == "surgery_mode") {
    surgery_mode = parse_enum(key, v, nn::parse_surgery_mode);
  } else if (key == "dataset") {
    dataset = parse_enum(key, v, data::parse_dataset_kind);
  } else if (key == "train_data") {
    train_data = std::string(v);
  } else if (key == "test_data") {
    test_data = std::string(v);
  } else if (key == "classes") {
    classes = to_int_list(key, v);
  } else if (key == "train_per_class") {
    train_per_class = static_cast<int>(to_int(key, v));
  } else if (key == "test_per_class") {
    test_per_class = static_cast<int>(to_int(key, v));
  } else if (key == "augment") {
    if (v == "auto") augment = AugmentSetting::automatic;
    else if (v == "on" || v == "true") augment = AugmentSetting::on;
    else if (v == "off" || v == "false") augment = AugmentSetting::off;
    else bad(key, v, "expected auto|on|off");
  } else if (key == "seed") {
    seed = to_u64(key, v);
  } else if (key == "teacher_checkpoint") {
    teacher_checkpoint = std::string(v);
  } else if (key == "pacemaker_checkpoint") {
    pacemaker_checkpoint = std::string(v);
  } else if (key == "init_checkpoint") {
    init_checkpoint = std::string(v);
  } else if (key == "checkpoint") {
    checkpoint = std::string(v);
  } else if (key == "out_dir") {
    out_dir = std::string(v);
  } else if (key == "tau") {
    d.tau = to_double(key, v);
  } else if (key == "alpha") {
    d.alpha = to_double(key, v);
  } else if (key == "rho") {
    d.rho = to_double(key, v);
  } else if (key == "epochs") {
    d.epochs = static_cast<int>(to_int(key, v));
  } else if (key == "batch_size") {
    d.batch_size = static_cast<int>(to_int(key, v));
  } else if (key == "eval_batch_size") {
    d.eval_batch_size = static_cast<int>(to_int(key, v));
  } else if (key == "base_lr") {
    d.base_lr = to_double(key, v);
  } else if (key == "milestones") {
    if (v == "auto") {
      scale_milestones = true;
    } else {
      scale_milestones = false;
      d.milestones = to_int_list(key, v);
    }
  } else if (key == "lr_factor") {
    d.factor = to_double(key, v);
  } else if (key == "momentum") {
    d.momentum = to_double(key, v);
  } else if (key == "weight_decay") {
    d.weight_decay = to_double(key, v);
  } else if (key == "tau_square_scaling") {
    d.tau_square_scaling = to_bool(key, v);
  } else if (key == "pacemaker_mode") {
    d.pacemaker_mode = parse_enum(key, v, kd::parse_pacemaker_mode);
  } else if (key == "ensemble_combine") {
    d.ensemble_combine = parse_enum(key, v, kd::parse_ensemble_combine);
  } else if (key == "phase1_training") {
    d.phase1_training = parse_enum(key, v, kd::parse_phase1_training);
  } else if (key == "phase1_feature_loss") {
    d.phase1_feature_loss = to_bool(key, v);
  } else if (key == "phase3_init") {
    d.phase3_init = parse_enum(key, v, kd::parse_phase3_init);
  } else if (key == "normalize") {
    d.normalize = to_bool(key, v);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
  if (seed) d.seed = *seed;
}

void RunConfig::validate() const {
  try {
    nn::ArchSpec::parse(arch).validate();
    resolved_distill().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0) throw ConfigError("config key 'classes': negative class id");
    for (std::size_t j = 0; j < i; ++j) {
      if (classes[i] == classes[j]) throw ConfigError("config key 'classes': duplicate class " + std::to_string(classes[i]));
    }
  }
}

kd::DistillConfig RunConfig::resolved_distill() const {
  kd::DistillConfig d = distill;
  if (scale_milestones) d.milestones = kd::scaled_milestones(d.epochs);
  if (seed) d.seed = *seed;
  return d;
}

std::string RunConfig::serialize() const {
  const kd::DistillConfig& d = distill;
  std::ostringstream o;
  o << "arch = " << arch << "\n"
    << "filter_mode = " << nn::to_string(filter_mode) << "\n"
    << "surgery_mode = " << nn::to_string(surgery_mode) << "\n"
    << "dataset = " << data::to_string(dataset) << "\n"
    << "train_data = " << train_data << "\n"
    << "test_data = " << test_data << "\n"
    << "classes = " << join(classes) << "\n"
    << "train_per_class = " << train_per_class << "\n"
    << "test_per_class = " << test_per_class << "\n"
    << "augment = " << to_string(augment) << "\n";
  if (seed) o << "seed = " << *seed << "\n";
  o << "teacher_checkpoint = " << teacher_checkpoint << "\n"
    << "pacemaker_checkpoint = " << pacemaker_checkpoint << "\n"
    << "init_checkpoint = " << init_checkpoint << "\n"
    << "checkpoint = " << checkpoint << "\n"
    << "out_dir = " << out_dir << "\n"
    << "tau = " << num(d.tau) << "\n"
    << "alpha = " << num(d.alpha) << "\n"
    << "rho = " << num(d.rho) << "\n"
    << "epochs = " << d.epochs << "\n"
    << "batch_size = " << d.batch_size << "\n"
    << "eval_batch_size = " << d.eval_batch_size << "\n"
    << "base_lr = " << num(d.base_lr) << "\n"
    << "milestones = " << (scale_milestones ? std::string("auto") : join(d.milestones)) << "\n"
    << "lr_factor = " << num(d.factor) << "\n"
    << "momentum = " << num(d.momentum) << "\n"
    << "weight_decay = " << num(d.weight_decay) << "\n"
    << "tau_square_scaling = " << (d.tau_square_scaling ? "true" : "false") << "\n"
    << "pacemaker_mode = " << kd::to_string(d.pacemaker_mode) << "\n"
    << "ensemble_combine = " << kd::to_string(d.ensemble_combine) << "\n"
    << "phase1_training = " << kd::to_string(d.phase1_training) << "\n"
    << "phase1_feature_loss = " << (d.phase1_feature_loss ? "true" : "false") << "\n"
    << "phase3_init = " << kd::to_string(d.phase3_init) << "\n"
    << "normalize = " << (d.normalize ? "true" : "false") << "\n";
  return o.str();
}

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
  RunConfig c;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

}  // namespace otf::app
