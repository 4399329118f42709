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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "otf/checkpoint.hpp"
#include "otf/commands.hpp"
#include "otf/error.hpp"
#include "otf/run_config.hpp"
#include "synthetic.hpp"

using namespace otf;
using namespace otf::app;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir;
  Scratch() {
    static int counter = 0;
    dir = fs::temp_directory_path() / ("otf_test_app_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Cli r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Value following `key=` on its own line, or "" when absent.
std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  }
  return "";
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

/// Three colour classes at 8x8, train and test containers on disk.
void write_tiny_data(const Scratch& s) {
  data::write_container(synth::colour_container(12, 3, 8, 1), s / "train.otfd");
  auto test = synth::colour_container(5, 3, 8, 2);
  const auto train = data::read_container(s / "train.otfd");
  test.mean = train.mean;
  test.std = train.std;
  data::write_container(test, s / "test.otfd");
}

std::vector<std::string> data_flags(const Scratch& s) {
  return {"--arch", "tiny4", "--train-data", s / "train.otfd", "--test-data", s / "test.otfd", "--out", s / "runs",
          "--batch-size", "16"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

nn::Model tiny_model(nn::FilterMode mode, std::uint64_t seed) {
  auto spec = nn::ArchSpec::parse("tiny4", 3);
  spec.in_h = spec.in_w = 8;
  auto m = nn::build(spec, mode);
  nn::init_weights(m, seed);
  return m;
}

Tensor logits_of(nn::Model& m, std::uint64_t seed) {
  Tensor x(Shape{2, 3, 8, 8});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  for (float& v : x.data()) v = nd(rng);
  Tape t;
  return nn::run_graph(m, t, t.constant(x), nn::Role::frozen).back().value();
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string slurp_text(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("FNV-1a 64 reference vectors") {
  auto h = [](const std::string& s) {
    return fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  };
  CHECK(h("") == 0xcbf29ce484222325ull);
  CHECK(h("a") == 0xaf63dc4c8601ec8cull);
  CHECK(h("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("checkpoint byte layout") {
  Tensor t(Shape{2, 3});
  std::iota(t.data().begin(), t.data().end(), 0.0f);
  const std::vector<NamedTensor> ts{{"ab", t}};
  const auto bytes = encode_checkpoint(ts);
  // magic 4 + version 4 + count 4 + name len 2 + "ab" + dtype 1 + rank 1 + dims 2*4 + 6 floats + checksum 8.
  REQUIRE(bytes.size() == 12 + 2 + 2 + 1 + 1 + 8 + 24 + 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PMKD");
  CHECK(bytes[4] == kCheckpointVersion);
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 2);
  CHECK(bytes[16] == 0);
  CHECK(bytes[17] == 2);
  CHECK(bytes[18] == 2);
  CHECK(bytes[22] == 3);
  std::uint64_t stored = 0;
  for (int i = 7; i >= 0; --i) stored = (stored << 8) | bytes[bytes.size() - 8 + static_cast<std::size_t>(i)];
  CHECK(stored == fnv1a64({bytes.data(), bytes.size() - 8}));
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 1);
  CHECK(back[0].name == "ab");
  CHECK(back[0].value.bitwise_equal(t));
}

TEST_CASE("save/load reproduces every parameter and the forward pass") {
  Scratch s;
  auto m = tiny_model(nn::FilterMode::row_student, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd(0.0f, 0.1f);
  for (auto& p : m.params()) {
    for (float& v : p.value.data()) v += p.name.ends_with("running_var") ? std::abs(nd(rng)) : nd(rng);
  }
  save_checkpoint(m, s / "m.ckpt");
  auto back = load_checkpoint(s / "m.ckpt", m.spec(), nn::FilterMode::row_student);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params()[i].name == m.params()[i].name);
    CHECK(back.params()[i].value.bitwise_equal(m.params()[i].value));
  }
  CHECK(logits_of(m, 1).bitwise_equal(logits_of(back, 1)));
  CHECK(file_checksum(s / "m.ckpt") == fnv1a64({slurp(s / "m.ckpt").data(), slurp(s / "m.ckpt").size() - 8}));
}

TEST_CASE("damaged checkpoints raise distinct errors") {
  Scratch s;
  const auto m = tiny_model(nn::FilterMode::teacher, 5);
  save_checkpoint(m, s / "t.ckpt");
  const auto good = slurp(s / "t.ckpt");

  auto truncated = good;
  truncated.resize(good.size() / 2);
  dump(s / "trunc.ckpt", truncated);
  CHECK_THROWS_AS(read_checkpoint(s / "trunc.ckpt"), ChecksumError);
  dump(s / "tiny.ckpt", {'P', 'M'});
  CHECK_THROWS_AS(read_checkpoint(s / "tiny.ckpt"), FormatError);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  dump(s / "flip.ckpt", flipped);
  CHECK_THROWS_AS(read_checkpoint(s / "flip.ckpt"), ChecksumError);

  auto magic = good;
  magic[0] = 'Q';
  dump(s / "magic.ckpt", magic);
  try {
    read_checkpoint(s / "magic.ckpt");
    FAIL("expected FormatError");
  } catch (const ChecksumError&) {
    FAIL("bad magic must not be reported as a checksum failure");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }

  CHECK_THROWS_AS(read_checkpoint(s / "missing.ckpt"), FormatError);
}

TEST_CASE("teacher checkpoint into a student build names the first conv") {
  Scratch s;
  save_checkpoint(tiny_model(nn::FilterMode::teacher, 6), s / "t.ckpt");
  const auto spec = tiny_model(nn::FilterMode::teacher, 6).spec();
  try {
    load_checkpoint(s / "t.ckpt", spec, nn::FilterMode::row_student);
    FAIL("expected MismatchError");
  } catch (const MismatchError& e) {
    CHECK(std::string(e.what()).find("conv0.conv.weight") != std::string::npos);
  }
  auto other = nn::ArchSpec::parse("tiny6", 3);
  other.in_h = other.in_w = 8;
  CHECK_THROWS_AS(load_checkpoint(s / "t.ckpt", other, nn::FilterMode::teacher), MismatchError);

  // Extra tensors are rejected when loading without a prefix.
  auto ts = model_tensors(tiny_model(nn::FilterMode::teacher, 6));
  ts.push_back({"stray", Tensor(Shape{1})});
  auto m = tiny_model(nn::FilterMode::teacher, 7);
  CHECK_THROWS_AS(load_tensors(m, ts), MismatchError);
}

TEST_CASE("RunConfig parsing") {
  const auto c = RunConfig::parse(
      "# comment\n"
      "arch = tiny6\n"
      "\n"
      "filter_mode=row_student\n"
      "seed = 7   # trailing comment\n"
      "rho = 0.5\n"
      "alpha = 0.25\n"
      "tau = 3\n"
      "classes = 0,3\n"
      "pacemaker_mode = column_only\n"
      "milestones = auto\n"
      "epochs = 30\n");
  CHECK(c.arch == "tiny6");
  CHECK(c.filter_mode == nn::FilterMode::row_student);
  CHECK(c.seed == 7u);
  CHECK(c.distill.rho == 0.5);
  CHECK(c.distill.alpha == 0.25);
  CHECK(c.distill.tau == 3.0);
  CHECK(c.classes == std::vector<int>{0, 3});
  CHECK(c.distill.pacemaker_mode == kd::PacemakerMode::column_only);
  CHECK(c.resolved_distill().milestones == std::vector<int>{9, 18, 24});

  const auto again = RunConfig::parse(c.serialize());
  CHECK(again.serialize() == c.serialize());
  CHECK(RunConfig::keys().size() == 34);
  CHECK(RunConfig::parse(RunConfig{}.serialize()).serialize() == RunConfig{}.serialize());
}

TEST_CASE("RunConfig rejects unknown keys and invalid values, naming the key") {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    CAPTURE(text);
    try {
      RunConfig::parse(text);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_error("learning_rate = 0.1\n", "learning_rate");
  expect_error("tau = 0\n", "tau");
  expect_error("alpha = 1.5\n", "alpha");
  expect_error("rho = -1\n", "rho");
  expect_error("epochs = many\n", "epochs");
  expect_error("arch = resnet20\n", "resnet20");
  expect_error("filter_mode = diagonal\n", "filter_mode");
  expect_error("just a line\n", "=");
  expect_error("batch_size = 0\n", "batch");
}

TEST_CASE("run directories are never reused") {
  Scratch s;
  const auto a = make_run_dir(s.dir, "eval", 3);
  const auto b = make_run_dir(s.dir, "eval", 3);
  CHECK(a != b);
  CHECK(fs::is_directory(a));
  CHECK(fs::is_directory(b));
  CHECK(a.filename().string().rfind("eval-s3-", 0) == 0);
}

TEST_CASE("repeat summary arithmetic") {
  const auto one = summarize_repeats({5}, {0.8});
  CHECK(one.mean == 0.8);
  CHECK(one.deviations == std::vector<double>{0.0});

  const auto r = summarize_repeats({1, 2, 3, 4, 5}, {0.4469, 0.4653, 0.4784, 0.4873, 0.4951});
  CHECK(r.mean == doctest::Approx(0.4746));
  CHECK(std::abs(std::accumulate(r.deviations.begin(), r.deviations.end(), 0.0)) < 1e-12);
  CHECK_THROWS_AS(summarize_repeats({}, {}), ParamError);
  CHECK_THROWS_AS(summarize_repeats({1}, {0.1, 0.2}), ParamError);
}

TEST_CASE("param-report on tiny4") {
  const auto r = cli({"param-report", "--arch", "tiny4"});
  REQUIRE(r.code == 0);
  CHECK(field(r.out, "conv_ratio") == "0.333333333333");
  const double model_ratio = std::stod(field(r.out, "model_ratio"));
  CHECK(model_ratio > 1.0 / 3.0);
  CHECK(model_ratio < 1.0);
  CHECK(std::stoll(field(r.out, "teacher_conv_params")) == 3 * std::stoll(field(r.out, "student_conv_params")));
}

TEST_CASE("exit codes") {
  Scratch s;
  write_tiny_data(s);
  // Usage error.
  auto r = cli({"no-such-verb"});
  CHECK(r.code == 2);
  CHECK(lines_of(r.err).size() == 1);
  // Invalid configuration: missing seed, unknown key, bad value.
  r = cli(concat({"train-teacher"}, data_flags(s)));
  CHECK(r.code == 2);
  CHECK(r.err.find("seed") != std::string::npos);
  r = cli(concat({"train-teacher", "--seed", "1", "--set", "bogus=1"}, data_flags(s)));
  CHECK(r.code == 2);
  CHECK(r.err.find("bogus") != std::string::npos);
  r = cli(concat({"train-teacher", "--seed", "1", "--tau", "-2"}, data_flags(s)));
  CHECK(r.code == 2);
  // Runtime failure: a missing container.
  r = cli({"train-teacher", "--seed", "1", "--arch", "tiny4", "--train-data", s / "absent.otfd", "--out", s / "runs"});
  CHECK(r.code == 1);
  CHECK(lines_of(r.err).size() == 1);
  // A teacher checkpoint that does not exist.
  r = cli(concat({"run-pipeline", "--seed", "1", "--epochs", "0", "--teacher", s / "absent.ckpt"}, data_flags(s)));
  CHECK(r.code == 1);
}

TEST_CASE("the installed binary reports the same exit codes") {
  const char* bin = std::getenv("OTF_BIN");
  if (bin == nullptr) return;
  auto status = [&](const std::string& args) {
    const int st = std::system((std::string(bin) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  CHECK(status("param-report --arch tiny4") == 0);
  CHECK(status("frobnicate") == 2);
  CHECK(status("eval --arch tiny4 --checkpoint /nonexistent.ckpt --data /nonexistent.otfd") == 1);
}

TEST_CASE("train-teacher, eval and the zero-epoch pipeline") {
  Scratch s;
  write_tiny_data(s);
  auto r = cli(concat({"train-teacher", "--seed", "3", "--epochs", "2"}, data_flags(s)));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const fs::path tdir = field(r.out, "run_dir");
  CHECK(fs::exists(tdir / "model.ckpt"));
  CHECK(fs::exists(tdir / "config.txt"));
  CHECK(lines_of(slurp_text(tdir / "metrics.tsv")).size() == 3);
  const double acc = std::stod(field(r.out, "accuracy"));
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  // The saved config reproduces the run's settings.
  CHECK(RunConfig::load(tdir / "config.txt").seed == 3u);

  r = cli({"eval", "--arch", "tiny4", "--checkpoint", (tdir / "model.ckpt").string(), "--data", s / "train.otfd"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const double train_acc = std::stod(lines_of(r.out).at(0));
  CHECK(train_acc >= 0.0);
  CHECK(train_acc <= 1.0);
  r = cli({"eval", "--arch", "tiny4", "--checkpoint", (tdir / "model.ckpt").string(), "--data", s / "test.otfd"});
  CHECK(std::stod(lines_of(r.out).at(0)) == doctest::Approx(acc).epsilon(1e-5));

  // Same config and seed: same checkpoint checksum.
  const auto again = cli(concat({"train-teacher", "--seed", "3", "--epochs", "2"}, data_flags(s)));
  CHECK(field(again.out, "checksum") == field(cli(concat({"train-teacher", "--seed", "3", "--epochs", "2"}, data_flags(s))).out, "checksum"));
  CHECK(field(again.out, "run_dir") != tdir.string());

  r = cli(concat({"run-pipeline", "--seed", "3", "--epochs", "0", "--teacher", (tdir / "model.ckpt").string()},
                 data_flags(s)));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const fs::path pdir = field(r.out, "run_dir");
  for (const char* f : {"phase1_pacemaker.ckpt", "phase2_student.ckpt", "phase3_student.ckpt"}) CHECK(fs::exists(pdir / f));
  const auto log = lines_of(slurp_text(pdir / "phases.log"));
  REQUIRE(log.size() == 3);
  CHECK(log[0].rfind("phase=1", 0) == 0);
  CHECK(log[1].rfind("phase=2", 0) == 0);
  CHECK(log[2].rfind("phase=3", 0) == 0);
  // With zero epochs the phase-3 student is the transplanted row member.
  const auto pm = read_checkpoint(pdir / "phase1_pacemaker.ckpt");
  const auto st = read_checkpoint(pdir / "phase3_student.ckpt");
  std::size_t matched = 0;
  for (const auto& t : st) {
    for (const auto& p : pm) {
      if (p.name == "row." + t.name) {
        CHECK(p.value.bitwise_equal(t.value));
        ++matched;
      }
    }
  }
  CHECK(matched == st.size());

  // Single phases from the command line.
  r = cli(concat({"run-phase", "1", "--seed", "3", "--epochs", "0", "--teacher", (tdir / "model.ckpt").string()},
                 data_flags(s)));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("phase=1 teacher=teacher:tiny4 trainee=pacemaker(ensemble):tiny4") != std::string::npos);
  r = cli(concat({"run-phase", "4", "--seed", "3"}, data_flags(s)));
  CHECK(r.code == 2);
}

TEST_CASE("seed repeats") {
  Scratch s;
  write_tiny_data(s);
  auto r = cli(concat({"train-teacher", "--seed", "9", "--epochs", "1", "--repeat", "1"}, data_flags(s)));
  REQUIRE(r.code == 0);
  const std::string single = field(r.out, "accuracy");

  r = cli(concat({"train-teacher", "--seed", "9", "--epochs", "1", "--repeat", "3", "--same-seed"}, data_flags(s)));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto devs = field(r.out, "deviations");
  CHECK(devs == "0,0,0");
  std::set<std::string> sums;
  for (const auto& l : lines_of(r.out)) {
    if (l.rfind("seed=9 ", 0) == 0) sums.insert(l.substr(l.find("checksum=")));
  }
  CHECK(sums.size() == 1);
  CHECK(std::stod(field(r.out, "mean")) == doctest::Approx(std::stod(single)));

  r = cli(concat({"train-teacher", "--seed", "9", "--epochs", "1", "--repeat", "2"}, data_flags(s)));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("seed=9 ") != std::string::npos);
  CHECK(r.out.find("seed=10 ") != std::string::npos);
  double total = 0.0;
  std::istringstream dv(field(r.out, "deviations"));
  for (std::string tok; std::getline(dv, tok, ',');) total += std::stod(tok);
  CHECK(std::abs(total) < 1e-6);
  CHECK(fs::exists(fs::path(field(r.out, "run_dir")) / "repeat.tsv"));
}

TEST_CASE("metrics file: one tab-separated line per epoch") {
  Scratch s;
  {
    MetricsWriter w(s / "m.tsv");
    kd::EpochRecord rec;
    rec.epoch = 0;
    rec.lr = 0.1;
    w.append(2, rec, "column_only");
    rec.epoch = 1;
    w.append(2, rec, "column_only");
  }
  const auto lines = lines_of(slurp_text(s / "m.tsv"));
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "phase\tepoch\tlr\tl_fkd\tl_lkd\tl_ce\ttotal\ttest_acc\tpm_mode");
  CHECK(lines[1].rfind("2\t0\t0.1\t", 0) == 0);
  CHECK(lines[2].ends_with("\tcolumn_only"));
}

TEST_CASE("stream-infer and equiv-check from the command line") {
  Scratch s;
  write_tiny_data(s);
  auto r = cli(concat({"train-teacher", "--seed", "2", "--epochs", "1", "--filter-mode", "row_student"}, data_flags(s)));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string ckpt = (fs::path(field(r.out, "run_dir")) / "model.ckpt").string();

  r = cli({"equiv-check", "--arch", "tiny4", "--filter-mode", "row_student", "--checkpoint", ckpt, "--train-data",
           s / "train.otfd", "--count", "5"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(std::stod(field(r.out, "max_abs_diff")) < 1e-4);
  CHECK(field(r.out, "argmax_agree").rfind("5/5", 0) == 0);

  // One image as raw rows: 8 rows of 3 channels x 8 bytes.
  const auto train = data::read_container(s / "train.otfd");
  std::vector<std::uint8_t> raw;
  const auto img = train.image(0);
  for (int y = 0; y < 8; ++y)
    for (int c = 0; c < 3; ++c)
      for (int x = 0; x < 8; ++x) raw.push_back(img[static_cast<std::size_t>((c * 8 + y) * 8 + x)]);
  dump(s / "rows.raw", raw);
  r = cli({"stream-infer", "--arch", "tiny4", "--filter-mode", "row_student", "--checkpoint", ckpt, "--train-data",
           s / "train.otfd", "--input", s / "rows.raw"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(lines_of(r.out).size() == 3);

  // A teacher checkpoint cannot be loaded into the streamed row build.
  save_checkpoint(tiny_model(nn::FilterMode::teacher, 1), s / "teacher.ckpt");
  r = cli({"stream-infer", "--arch", "tiny4", "--checkpoint", s / "teacher.ckpt", "--train-data", s / "train.otfd",
           "--input", s / "rows.raw"});
  CHECK(r.code == 1);
  CHECK(r.err.find("conv0.conv.weight") != std::string::npos);

  raw.resize(raw.size() - 5);
  dump(s / "short.raw", raw);
  r = cli({"stream-infer", "--arch", "tiny4", "--checkpoint", ckpt, "--train-data", s / "train.otfd", "--input",
           s / "short.raw"});
  CHECK(r.code == 1);
  CHECK(r.err.find("short row") != std::string::npos);
}

TEST_CASE("import-dataset converts CIFAR binaries") {
  Scratch s;
  dump(s / "tr.bin", synth::cifar10_records(2, 10, 1));
  dump(s / "te.bin", synth::cifar10_records(1, 10, 2));
  auto r = cli({"import-dataset", "--format", "cifar10", "--train-files", s / "tr.bin", "--test-files", s / "te.bin",
                "--out-train", s / "tr.otfd", "--out-test", s / "te.otfd"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("train count=20 classes=10 shape=3x32x32") != std::string::npos);
  CHECK(data::read_container(s / "te.otfd").count() == 10);
  r = cli({"import-dataset", "--format", "otfd", "--kind", "svhn", "--train-files", s / "tr.otfd"});
  CHECK(r.code == 1);
  r = cli({"import-dataset", "--format", "png"});
  CHECK(r.code == 2);
}
