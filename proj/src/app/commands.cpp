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

#include "otf/commands.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "otf/checkpoint.hpp"
#include "otf/error.hpp"
#include "otf/ops.hpp"
#include "otf/run_config.hpp"
#include "otf/stream.hpp"

namespace otf::app {

namespace fs = std::filesystem;

fs::path make_run_dir(const fs::path& base, const std::string& command, std::uint64_t seed) {
  fs::create_directories(base);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream name;
  name << command << "-s" << seed << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  const std::string stem = name.str();
  for (int k = 0;; ++k) {
    const fs::path p = base / (k == 0 ? stem : stem + "-" + std::to_string(k));
    if (fs::create_directory(p)) return p;
  }
}

RepeatSummary summarize_repeats(std::vector<std::uint64_t> seeds, std::vector<double> values) {
  if (values.empty() || seeds.size() != values.size()) throw ParamError("repeat summary needs one value per seed");
  RepeatSummary s;
  s.seeds = std::move(seeds);
  s.values = std::move(values);
  double sum = 0.0;
  for (double v : s.values) sum += v;
  s.mean = sum / static_cast<double>(s.values.size());
  for (double v : s.values) s.deviations.push_back(v - s.mean);
  return s;
}

MetricsWriter::MetricsWriter(const fs::path& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open metrics file " + path.string());
  out_ << "phase\tepoch\tlr\tl_fkd\tl_lkd\tl_ce\ttotal\ttest_acc\tpm_mode\n";
  out_.flush();
}

void MetricsWriter::append(int phase, const kd::EpochRecord& r, const std::string& pm_mode) {
  out_ << phase << '\t' << r.epoch << '\t' << std::setprecision(9) << r.lr << '\t' << r.fkd << '\t' << r.lkd << '\t'
       << r.ce << '\t' << r.total << '\t' << r.test_acc << '\t' << pm_mode << '\n';
  out_.flush();
}

namespace {

class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

struct Split {
  data::Container train;
  std::optional<data::Container> test;
  data::AugmentPolicy augment;
};

data::Container restrict(const data::Container& c, const RunConfig& cfg, int per_class) {
  if (cfg.classes.empty() && per_class < 0) return c;
  std::vector<int> classes = cfg.classes;
  if (classes.empty()) {
    for (int k = 0; k < c.num_classes; ++k) classes.push_back(k);
  }
  for (int k : classes) {
    if (k >= c.num_classes) {
      throw ConfigError("config key 'classes': class " + std::to_string(k) + " not in dataset with " +
                        std::to_string(c.num_classes) + " classes");
    }
  }
  return data::subset(c, classes, per_class);
}

data::Container load_container(const std::string& path, const RunConfig& cfg, int per_class) {
  return restrict(data::read_container(path, cfg.dataset), cfg, per_class);
}

Split load_split(const RunConfig& cfg) {
  if (cfg.train_data.empty()) throw ConfigError("train_data is required");
  Split s;
  s.train = load_container(cfg.train_data, cfg, cfg.train_per_class);
  if (!cfg.test_data.empty()) s.test = load_container(cfg.test_data, cfg, cfg.test_per_class);
  switch (cfg.augment) {
    case AugmentSetting::automatic: s.augment = data::AugmentPolicy::for_kind(cfg.dataset); break;
    case AugmentSetting::on: s.augment.enabled = true; break;
    case AugmentSetting::off: s.augment.enabled = false; break;
  }
  s.augment.crop_h = s.train.height;
  s.augment.crop_w = s.train.width;
  return s;
}

nn::ArchSpec spec_for(const RunConfig& cfg, int num_classes, int channels, int height, int width) {
  nn::ArchSpec spec = nn::ArchSpec::parse(cfg.arch, num_classes);
  spec.in_channels = channels;
  spec.in_h = height;
  spec.in_w = width;
  spec.validate();
  return spec;
}

nn::ArchSpec spec_for(const RunConfig& cfg, const data::Container& c) {
  return spec_for(cfg, c.num_classes, c.channels, c.height, c.width);
}

// Class count after the `classes` restriction.
nn::ArchSpec spec_for_header(const RunConfig& cfg, const data::Container& header) {
  const int k = cfg.classes.empty() ? header.num_classes : static_cast<int>(cfg.classes.size());
  return spec_for(cfg, k, header.channels, header.height, header.width);
}

bool is_pacemaker_file(std::span<const NamedTensor> ts) {
  for (const NamedTensor& t : ts) {
    if (t.name.rfind("row.", 0) == 0) return true;
  }
  return false;
}

std::vector<NamedTensor> pacemaker_tensors(const kd::Pacemaker& pm) {
  std::vector<NamedTensor> ts = model_tensors(pm.row, "row.");
  for (NamedTensor& t : model_tensors(pm.column, "col.")) ts.push_back(std::move(t));
  return ts;
}

kd::Pacemaker load_pacemaker(const std::string& path, const nn::ArchSpec& spec, const RunConfig& cfg) {
  const auto ts = read_checkpoint(path);
  kd::Pacemaker pm{nn::build(spec, nn::FilterMode::row_student, cfg.surgery_mode),
                   nn::build(spec, nn::FilterMode::column, cfg.surgery_mode), cfg.distill.pacemaker_mode,
                   cfg.distill.ensemble_combine};
  load_tensors(pm.row, ts, "row.");
  load_tensors(pm.column, ts, "col.");
  return pm;
}

nn::Model load_model(const std::string& path, const nn::ArchSpec& spec, nn::FilterMode mode, const RunConfig& cfg) {
  return load_checkpoint(path, spec, mode, cfg.surgery_mode);
}

std::string require(const std::string& v, const char* key) {
  if (v.empty()) throw ConfigError(std::string(key) + " is required");
  return v;
}

// Options shared by every verb; flags map onto config keys and are applied after --config.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option*> opts;
  int repeat = 1;
  bool same_seed = false;

  void add_flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    opts[key] = app->add_option(name, flags[key], help);
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::load(config);
    for (const auto& [key, opt] : opts) {
      if (opt->count() > 0) cfg.set(key, flags.at(key));
    }
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      std::string key = kv.substr(0, eq);
      while (!key.empty() && key.back() == ' ') key.pop_back();
      cfg.set(key, kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c, bool training) {
  app->add_option("--config", c.config, "key=value run configuration file");
  app->add_option("--set", c.sets, "override one config key (key=value), repeatable");
  c.add_flag(app, "--seed", "seed", "run seed");
  c.add_flag(app, "--arch", "arch", "architecture id (tiny6, vgg16bn, resnet18, wrn28-6, ...)");
  c.add_flag(app, "--filter-mode", "filter_mode", "teacher|row_student|column");
  c.add_flag(app, "--surgery-mode", "surgery_mode", "interior|all_pools|edge_convs");
  c.add_flag(app, "--dataset", "dataset", "cifar10|cifar100|svhn|custom");
  c.add_flag(app, "--train-data", "train_data", "OTFD training container");
  c.add_flag(app, "--test-data", "test_data", "OTFD test container");
  c.add_flag(app, "--checkpoint", "checkpoint", "model checkpoint");
  c.add_flag(app, "--teacher", "teacher_checkpoint", "pre-trained teacher checkpoint");
  c.add_flag(app, "--pacemaker", "pacemaker_checkpoint", "phase-1 pacemaker checkpoint");
  c.add_flag(app, "--init", "init_checkpoint", "phase-3 starting weights (pacemaker or row-student checkpoint)");
  c.add_flag(app, "--out", "out_dir", "parent directory for run directories");
  if (training) {
    c.add_flag(app, "--epochs", "epochs", "epochs per phase");
    c.add_flag(app, "--batch-size", "batch_size", "mini-batch size");
    c.add_flag(app, "--rho", "rho", "feature-loss weight");
    c.add_flag(app, "--alpha", "alpha", "logit-distillation weight");
    c.add_flag(app, "--tau", "tau", "temperature");
    c.add_flag(app, "--pacemaker-mode", "pacemaker_mode", "ensemble|column_only");
    app->add_option("--repeat", c.repeat, "run seeds seed..seed+k-1 and report mean and deviations")
        ->check(CLI::PositiveNumber);
    app->add_flag("--same-seed", c.same_seed, "with --repeat: reuse the same seed k times");
  }
}

std::uint64_t require_seed(const RunConfig& cfg) {
  if (!cfg.seed) throw ConfigError("--seed is required for training commands");
  return *cfg.seed;
}

// Result of one training run: a headline accuracy and the checkpoint that carries it.
struct RunResult {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  fs::path checkpoint;
};

using RunFn = std::function<RunResult(const RunConfig&, const fs::path& dir, std::ostream& out)>;

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

double accuracy_or_nan(const kd::Network& net, const std::optional<data::Container>& test,
                       const kd::DistillConfig& d) {
  return test ? kd::evaluate(net, *test, d) : std::numeric_limits<double>::quiet_NaN();
}

RunResult cmd_train_teacher(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Split split = load_split(cfg);
  const nn::ArchSpec spec = spec_for(cfg, split.train);
  kd::DistillConfig d = cfg.resolved_distill();
  d.rho = 0.0;
  d.alpha = 0.0;
  nn::Model model = nn::build(spec, cfg.filter_mode, cfg.surgery_mode);
  nn::init_weights(model, kd::derive_seed(d.seed, 0));
  MetricsWriter metrics(dir / "metrics.tsv");
  const kd::PhaseData pd{&split.train, split.test ? &*split.test : nullptr, split.augment};
  kd::run_phase(0, std::nullopt, kd::Network{&model}, pd, d, kd::derive_seed(d.seed, 100),
                [&](int phase, const kd::EpochRecord& r) { metrics.append(phase, r, "-"); });
  RunResult res;
  res.checkpoint = dir / "model.ckpt";
  save_checkpoint(model, res.checkpoint);
  res.accuracy = accuracy_or_nan(kd::Network{&model}, split.test, d);
  out << "model=" << nn::to_string(model.mode()) << ":" << spec.id() << "\n";
  return res;
}

RunResult cmd_run_pipeline(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Split split = load_split(cfg);
  const nn::ArchSpec spec = spec_for(cfg, split.train);
  const kd::DistillConfig d = cfg.resolved_distill();
  nn::Model teacher = load_model(require(cfg.teacher_checkpoint, "teacher_checkpoint"), spec, nn::FilterMode::teacher, cfg);
  MetricsWriter metrics(dir / "metrics.tsv");
  const std::string pm_mode = kd::to_string(d.pacemaker_mode);
  const kd::PhaseData pd{&split.train, split.test ? &*split.test : nullptr, split.augment};
  std::ofstream log(dir / "phases.log");
  const kd::PipelineResult r = kd::run_pipeline(
      spec, teacher, pd, d, cfg.surgery_mode,
      [&](int phase, const kd::PipelineResult& partial) {
        if (phase == 1) write_checkpoint(pacemaker_tensors(partial.pacemaker), dir / "phase1_pacemaker.ckpt");
        if (phase == 2) save_checkpoint(partial.phase2_student, dir / "phase2_student.ckpt");
        if (phase == 3) save_checkpoint(partial.student, dir / "phase3_student.ckpt");
        log << partial.log.back() << "\n";
        log.flush();
      },
      [&](int phase, const kd::EpochRecord& rec) { metrics.append(phase, rec, pm_mode); });
  for (const std::string& line : r.log) out << line << "\n";
  RunResult res;
  res.checkpoint = dir / "phase3_student.ckpt";
  nn::Model student = r.student;
  res.accuracy = accuracy_or_nan(kd::Network{&student}, split.test, d);
  return res;
}

RunResult cmd_run_phase(int phase, const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Split split = load_split(cfg);
  const nn::ArchSpec spec = spec_for(cfg, split.train);
  const kd::DistillConfig d = cfg.resolved_distill();
  MetricsWriter metrics(dir / "metrics.tsv");
  const std::string pm_mode = kd::to_string(d.pacemaker_mode);
  const kd::PhaseData pd{&split.train, split.test ? &*split.test : nullptr, split.augment};
  const auto on_epoch = [&](int p, const kd::EpochRecord& rec) { metrics.append(p, rec, pm_mode); };
  const std::uint64_t data_seed = kd::derive_seed(d.seed, 100 + static_cast<std::uint64_t>(phase));
  RunResult res;
  kd::PhaseReport rep;
  if (phase == 1) {
    nn::Model teacher = load_model(require(cfg.teacher_checkpoint, "teacher_checkpoint"), spec, nn::FilterMode::teacher, cfg);
    kd::Pacemaker pm = kd::make_pacemaker(spec, d.seed, d.pacemaker_mode, d.ensemble_combine, cfg.surgery_mode);
    rep = kd::run_phase(1, kd::Network{&teacher}, kd::Network{&pm}, pd, d, data_seed, on_epoch);
    res.checkpoint = dir / "phase1_pacemaker.ckpt";
    write_checkpoint(pacemaker_tensors(pm), res.checkpoint);
    res.accuracy = accuracy_or_nan(kd::Network{&pm}, split.test, d);
  } else if (phase == 2) {
    kd::Pacemaker pm = load_pacemaker(require(cfg.pacemaker_checkpoint, "pacemaker_checkpoint"), spec, cfg);
    nn::Model student = nn::build(spec, nn::FilterMode::row_student, cfg.surgery_mode);
    nn::init_weights(student, kd::derive_seed(d.seed, 3));
    rep = kd::run_phase(2, kd::Network{&pm}, kd::Network{&student}, pd, d, data_seed, on_epoch);
    res.checkpoint = dir / "phase2_student.ckpt";
    save_checkpoint(student, res.checkpoint);
    res.accuracy = accuracy_or_nan(kd::Network{&student}, split.test, d);
  } else if (phase == 3) {
    nn::Model teacher = load_model(require(cfg.teacher_checkpoint, "teacher_checkpoint"), spec, nn::FilterMode::teacher, cfg);
    nn::Model student = nn::build(spec, nn::FilterMode::row_student, cfg.surgery_mode);
    nn::init_weights(student, kd::derive_seed(d.seed, 4));
    if (!cfg.init_checkpoint.empty()) {
      const auto ts = read_checkpoint(cfg.init_checkpoint);
      load_tensors(student, ts, is_pacemaker_file(ts) ? "row." : "");
    }
    rep = kd::run_phase(3, kd::Network{&teacher}, kd::Network{&student}, pd, d, data_seed, on_epoch);
    res.checkpoint = dir / "phase3_student.ckpt";
    save_checkpoint(student, res.checkpoint);
    res.accuracy = accuracy_or_nan(kd::Network{&student}, split.test, d);
  } else {
    throw ConfigError("run-phase expects 1, 2 or 3, got " + std::to_string(phase));
  }
  out << "phase=" << rep.phase << " teacher=" << rep.teacher << " trainee=" << rep.trainee << "\n";
  return res;
}

// Runs `fn` once per seed, each in its own run directory; the repeat table is appended as runs finish.
void run_training(const std::string& verb, const RunConfig& base, const Common& c, const RunFn& fn, std::ostream& out) {
  const std::uint64_t seed0 = require_seed(base);
  if (c.repeat == 1) {
    const fs::path dir = make_run_dir(base.out_dir, verb, seed0);
    write_text(dir / "config.txt", base.serialize());
    const RunResult r = fn(base, dir, out);
    out << "run_dir=" << dir.string() << "\n";
    out << "checksum=" << hex64(file_checksum(r.checkpoint)) << "\n";
    out << "accuracy=" << std::setprecision(6) << r.accuracy << "\n";
    return;
  }
  const fs::path top = make_run_dir(base.out_dir, verb + "-repeat", seed0);
  std::ofstream table(top / "repeat.tsv");
  table << "seed\taccuracy\tchecksum\trun_dir\n";
  std::vector<std::uint64_t> seeds;
  std::vector<double> accs;
  for (int k = 0; k < c.repeat; ++k) {
    RunConfig cfg = base;
    const std::uint64_t s = c.same_seed ? seed0 : seed0 + static_cast<std::uint64_t>(k);
    cfg.set("seed", std::to_string(s));
    const fs::path dir = make_run_dir(top, verb, s);
    write_text(dir / "config.txt", cfg.serialize());
    const RunResult r = fn(cfg, dir, out);
    const std::string sum = hex64(file_checksum(r.checkpoint));
    table << s << '\t' << std::setprecision(6) << r.accuracy << '\t' << sum << '\t' << dir.string() << "\n";
    table.flush();
    out << "seed=" << s << " accuracy=" << std::setprecision(6) << r.accuracy << " checksum=" << sum << "\n";
    seeds.push_back(s);
    accs.push_back(r.accuracy);
  }
  const RepeatSummary rs = summarize_repeats(seeds, accs);
  out << "mean=" << std::setprecision(6) << rs.mean << "\ndeviations=";
  for (std::size_t i = 0; i < rs.deviations.size(); ++i) out << (i ? "," : "") << rs.deviations[i];
  out << "\nrun_dir=" << top.string() << "\n";
  table << "# mean\t" << rs.mean << "\n";
}

void cmd_eval(const RunConfig& cfg, const std::string& data_path, std::ostream& out) {
  const std::string path = !data_path.empty() ? data_path : !cfg.test_data.empty() ? cfg.test_data : cfg.train_data;
  if (path.empty()) throw ConfigError("eval needs --data, test_data or train_data");
  const data::Container c = load_container(path, cfg, -1);
  const nn::ArchSpec spec = spec_for(cfg, c);
  const auto ts = read_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const kd::DistillConfig d = cfg.resolved_distill();
  double acc = 0.0;
  if (is_pacemaker_file(ts)) {
    kd::Pacemaker pm = load_pacemaker(cfg.checkpoint, spec, cfg);
    acc = kd::evaluate(kd::Network{&pm}, c, d);
  } else {
    nn::Model m = nn::build(spec, cfg.filter_mode, cfg.surgery_mode);
    load_tensors(m, ts);
    acc = kd::evaluate(kd::Network{&m}, c, d);
  }
  out << std::setprecision(6) << acc << "\n";
}

void cmd_sweep_rho(const RunConfig& base, std::vector<double> rhos, std::ostream& out) {
  const std::uint64_t seed = require_seed(base);
  if (rhos.empty()) rhos = {0.01, 0.1, 0.5, 1.0, 2.0, 5.0};
  const fs::path top = make_run_dir(base.out_dir, "sweep-rho", seed);
  write_text(top / "config.txt", base.serialize());
  std::ofstream table(top / "sweep.tsv");
  table << "rho\taccuracy\tchecksum\n";
  for (double rho : rhos) {
    RunConfig cfg = base;
    std::ostringstream rs;
    rs << rho;
    cfg.set("rho", rs.str());
    cfg.validate();
    const fs::path dir = make_run_dir(top, "rho" + rs.str(), seed);
    write_text(dir / "config.txt", cfg.serialize());
    std::ostringstream sink;
    const RunResult r = cmd_run_pipeline(cfg, dir, sink);
    const std::string sum = hex64(file_checksum(r.checkpoint));
    table << rs.str() << '\t' << std::setprecision(6) << r.accuracy << '\t' << sum << "\n";
    table.flush();
    out << "rho=" << rs.str() << " accuracy=" << std::setprecision(6) << r.accuracy << "\n";
  }
  out << "run_dir=" << top.string() << "\n";
}

void cmd_stream_infer(const RunConfig& cfg, const std::string& input, std::ostream& out) {
  const std::string norm_src = !cfg.train_data.empty() ? cfg.train_data : cfg.test_data;
  if (norm_src.empty()) throw ConfigError("stream-infer needs train_data or test_data for shape and normalization");
  const data::Container header = data::read_container(norm_src, cfg.dataset);
  const nn::ArchSpec spec = spec_for_header(cfg, header);
  nn::Model m = load_model(require(cfg.checkpoint, "checkpoint"), spec, nn::FilterMode::row_student, cfg);
  const stream::StreamPlan plan = stream::plan_stream(m);

  std::ifstream file;
  std::istream* in = &std::cin;
  if (input != "-") {
    file.open(input, std::ios::binary);
    if (!file) throw Error("cannot open stream input " + input);
    in = &file;
  }
  std::vector<float> mean = header.mean, sd = header.std;
  if (!cfg.distill.normalize) {
    mean.assign(mean.size(), 0.0f);
    sd.assign(sd.size(), 1.0f / 255.0f);
  }
  const std::size_t row_bytes = static_cast<std::size_t>(plan.in_c) * static_cast<std::size_t>(plan.in_w);
  std::vector<std::uint8_t> row(row_bytes);
  int images = 0;
  while (true) {
    stream::StreamState st(plan);
    for (int y = 0; y < plan.in_h; ++y) {
      in->read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row_bytes));
      const auto got = static_cast<std::size_t>(in->gcount());
      if (got == 0 && y == 0) {
        if (images == 0) throw StreamError("stream input is empty");
        return;
      }
      if (got != row_bytes) {
        throw StreamError("image " + std::to_string(images) + " row " + std::to_string(y) + ": short row (" +
                          std::to_string(got) + " of " + std::to_string(row_bytes) + " bytes)");
      }
      st.push_row_bytes(row, mean, sd);
    }
    if (images > 0) out << "\n";
    for (float v : st.logits()) out << std::setprecision(9) << v << "\n";
    ++images;
  }
}

void cmd_equiv_check(const RunConfig& cfg, int count, std::ostream& out) {
  // Shape and class count come from a container when one is named, else the architecture defaults.
  const std::string src = !cfg.train_data.empty() ? cfg.train_data : cfg.test_data;
  const nn::ArchSpec spec = [&] {
    if (!src.empty()) return spec_for_header(cfg, data::read_container(src, cfg.dataset));
    nn::ArchSpec s = nn::ArchSpec::parse(cfg.arch, 10);
    s.validate();
    return s;
  }();
  nn::Model m = nn::build(spec, nn::FilterMode::row_student, cfg.surgery_mode);
  const std::uint64_t seed = cfg.seed.value_or(0);
  if (!cfg.checkpoint.empty()) {
    load_tensors(m, read_checkpoint(cfg.checkpoint));
  } else {
    nn::init_weights(m, seed);
  }
  const stream::StreamPlan plan = stream::plan_stream(m);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  double worst = 0.0;
  int agree = 0;
  for (int i = 0; i < count; ++i) {
    Tensor x(Shape{1, spec.in_channels, spec.in_h, spec.in_w});
    for (float& v : x.data()) v = nd(rng);
    const std::vector<float> s = stream::stream_infer(plan, x);
    Tape tape;
    const Tensor& b = nn::run_graph(m, tape, tape.constant(x), nn::Role::frozen).back().value();
    for (std::size_t j = 0; j < s.size(); ++j) worst = std::max(worst, std::abs(static_cast<double>(b[j]) - s[j]));
    const Tensor st(Shape{1, static_cast<int>(s.size())}, s);
    agree += argmax_rows(b)[0] == argmax_rows(st)[0] ? 1 : 0;
  }
  out << "max_abs_diff=" << std::setprecision(6) << worst << "\nargmax_agree=" << agree << "/" << count
      << "\nstream_memory_floats=" << plan.memory_budget << "\n";
  if (!(worst < 1e-4) || agree != count) throw Error("streaming and batch inference disagree");
}

void cmd_import(const std::string& format, const std::string& kind, const std::vector<std::string>& train_files,
                const std::vector<std::string>& test_files, const std::string& out_train, const std::string& out_test,
                std::ostream& out) {
  const auto summary = [&](const char* which, const data::Container& c) {
    out << which << " count=" << c.count() << " classes=" << c.num_classes << " shape=" << c.channels << "x"
        << c.height << "x" << c.width << "\n";
  };
  if (format == "otfd") {
    for (const auto& f : train_files) summary("train", data::read_container(f, data::parse_dataset_kind(kind)));
    for (const auto& f : test_files) summary("test", data::read_container(f, data::parse_dataset_kind(kind)));
    return;
  }
  data::CifarVariant variant;
  if (format == "cifar10") variant = data::CifarVariant::cifar10;
  else if (format == "cifar100") variant = data::CifarVariant::cifar100;
  else throw ConfigError("--format must be cifar10, cifar100 or otfd");
  if (train_files.empty() || test_files.empty()) throw ConfigError("--train-files and --test-files are required");
  if (out_train.empty() || out_test.empty()) throw ConfigError("--out-train and --out-test are required");
  const std::vector<fs::path> tr(train_files.begin(), train_files.end());
  const std::vector<fs::path> te(test_files.begin(), test_files.end());
  const data::CifarSplit split = data::import_cifar(variant, tr, te);
  data::write_container(split.train, out_train);
  data::write_container(split.test, out_test);
  summary("train", split.train);
  summary("test", split.test);
}

void cmd_param_report(const RunConfig& cfg, std::ostream& out) {
  const nn::ArchSpec spec = nn::ArchSpec::parse(cfg.arch, 10);
  spec.validate();
  const nn::Model t = nn::build(spec, nn::FilterMode::teacher, cfg.surgery_mode);
  const nn::Model s = nn::build(spec, nn::FilterMode::row_student, cfg.surgery_mode);
  const std::int64_t tc = nn::param_count(t, true), sc = nn::param_count(s, true);
  const std::int64_t ta = nn::param_count(t, false), sa = nn::param_count(s, false);
  out << "arch=" << spec.id() << "\n"
      << "teacher_conv_params=" << tc << "\nstudent_conv_params=" << sc << "\n"
      << "conv_ratio=" << std::setprecision(12) << static_cast<double>(sc) / static_cast<double>(tc) << "\n"
      << "teacher_params=" << ta << "\nstudent_params=" << sa << "\n"
      << "model_ratio=" << static_cast<double>(sa) / static_cast<double>(ta) << "\n"
      << "reduction=" << 1.0 - static_cast<double>(sa) / static_cast<double>(ta) << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"otf: pacemaker distillation and on-the-fly streaming inference", "otf"};
  app.require_subcommand(1);

  Common c_teacher, c_pipe, c_phase, c_eval, c_sweep, c_stream, c_equiv, c_param;
  auto* teacher = app.add_subcommand("train-teacher", "supervised training (rho = alpha = 0) of one build");
  add_common(teacher, c_teacher, true);

  auto* pipe = app.add_subcommand("run-pipeline", "teacher -> pacemaker -> student -> (teacher) student");
  add_common(pipe, c_pipe, true);

  int phase = 0;
  auto* phase_cmd = app.add_subcommand("run-phase", "run a single distillation phase");
  phase_cmd->add_option("phase", phase, "1, 2 or 3")->required();
  add_common(phase_cmd, c_phase, true);

  std::string eval_data;
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  add_common(eval, c_eval, false);
  eval->add_option("--data", eval_data, "container to evaluate (defaults to test_data)");

  std::vector<double> rhos;
  auto* sweep = app.add_subcommand("sweep-rho", "run the pipeline once per rho");
  add_common(sweep, c_sweep, true);
  sweep->add_option("--rhos", rhos, "rho values (default 0.01 0.1 0.5 1 2 5)");

  std::string stream_input = "-";
  auto* stream_cmd = app.add_subcommand("stream-infer", "row-by-row inference on raw 8-bit rows");
  add_common(stream_cmd, c_stream, false);
  stream_cmd->add_option("--input", stream_input, "raw row file, '-' for standard input");

  int equiv_count = 100;
  auto* equiv = app.add_subcommand("equiv-check", "compare streaming and batch logits on random images");
  add_common(equiv, c_equiv, false);
  equiv->add_option("--count", equiv_count, "number of random images")->check(CLI::PositiveNumber);

  std::string fmt, kind = "custom", out_train, out_test;
  std::vector<std::string> train_files, test_files;
  auto* import = app.add_subcommand("import-dataset", "convert CIFAR binaries to OTFD, or validate OTFD files");
  import->add_option("--format", fmt, "cifar10|cifar100|otfd")->required();
  import->add_option("--kind", kind, "dataset kind checked for --format otfd (svhn enforces record counts)");
  import->add_option("--train-files", train_files, "raw training files");
  import->add_option("--test-files", test_files, "raw test files");
  import->add_option("--out-train", out_train, "output training container");
  import->add_option("--out-test", out_test, "output test container");

  auto* param = app.add_subcommand("param-report", "teacher vs student parameter counts");
  add_common(param, c_param, false);

  std::vector<std::string> argv_store{"otf"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "otf: usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*teacher) {
      run_training("train-teacher", c_teacher.resolve(), c_teacher, cmd_train_teacher, out);
    } else if (*pipe) {
      run_training("run-pipeline", c_pipe.resolve(), c_pipe, cmd_run_pipeline, out);
    } else if (*phase_cmd) {
      if (phase < 1 || phase > 3) throw ConfigError("run-phase expects 1, 2 or 3, got " + std::to_string(phase));
      run_training("run-phase" + std::to_string(phase), c_phase.resolve(), c_phase,
                   [phase](const RunConfig& cfg, const fs::path& dir, std::ostream& o) {
                     return cmd_run_phase(phase, cfg, dir, o);
                   },
                   out);
    } else if (*eval) {
      cmd_eval(c_eval.resolve(), eval_data, out);
    } else if (*sweep) {
      cmd_sweep_rho(c_sweep.resolve(), rhos, out);
    } else if (*stream_cmd) {
      cmd_stream_infer(c_stream.resolve(), stream_input, out);
    } else if (*equiv) {
      cmd_equiv_check(c_equiv.resolve(), equiv_count, out);
    } else if (*import) {
      cmd_import(fmt, kind, train_files, test_files, out_train, out_test, out);
    } else if (*param) {
      cmd_param_report(c_param.resolve(), out);
    }
  } catch (const ConfigError& e) {
    err << "otf: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "otf: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace otf::app
