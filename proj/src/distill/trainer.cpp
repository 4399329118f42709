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

#include <cmath>
#include <limits>

#include "otf/distill.hpp"
#include "otf/error.hpp"
#include "otf/ops.hpp"
#include "otf/optim.hpp"

namespace otf::kd {
namespace {

template <class... Fs>
struct Visitor : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Visitor(Fs...) -> Visitor<Fs...>;

Var zero_scalar(Tape& tape) { return tape.constant(Tensor(Shape{1}, 0.0f)); }

struct LossParts {
  Var total, fkd, lkd, ce;
};

LossParts combined_loss(const ForwardOutput* teacher, const ForwardOutput& student, std::span<const int> labels,
                        const DistillConfig& cfg, bool use_features, Tape& tape) {
  LossParts p;
  p.ce = cross_entropy(student.logits, labels);
  p.fkd = (teacher && use_features && cfg.rho != 0.0) ? loss_fkd(teacher->features, student.features)
                                                      : zero_scalar(tape);
  p.lkd = (teacher && cfg.alpha != 0.0) ? loss_lkd(teacher->logits, student.logits, cfg.tau, cfg.tau_square_scaling)
                                        : zero_scalar(tape);
  p.total = total_loss(p.fkd, p.lkd, p.ce, cfg);
  return p;
}

double scalar(Var v) { return static_cast<double>(v.value()[0]); }

}  // namespace

std::string describe(const Network& net) {
  return std::visit(Visitor{
                        [](nn::Model* m) { return nn::to_string(m->mode()) + ":" + m->spec().id(); },
                        [](Pacemaker* pm) { return "pacemaker(" + to_string(pm->mode) + "):" + pm->row.spec().id(); },
                    },
                    net);
}

ForwardOutput forward(const Network& net, Tape& tape, Var x, nn::Role role) {
  return std::visit(Visitor{
                        [&](nn::Model* m) { return forward_with_taps(*m, tape, x, role); },
                        [&](Pacemaker* pm) {
                          return ensemble_forward(pm->row, pm->column, tape, x, role, pm->mode, pm->combine);
                        },
                    },
                    net);
}

std::vector<nn::TapShape> tap_shapes(const Network& net) {
  return std::visit(Visitor{
                        [](nn::Model* m) { return m->tap_shapes(); },
                        [](Pacemaker* pm) { return pm->column.tap_shapes(); },
                    },
                    net);
}

std::vector<Parameter*> trainable_parameters(const Network& net) {
  return std::visit(Visitor{
                        [](nn::Model* m) { return m->trainable_parameters(); },
                        [](Pacemaker* pm) {
                          std::vector<Parameter*> out;
                          if (pm->mode == PacemakerMode::ensemble) out = pm->row.trainable_parameters();
                          for (Parameter* p : pm->column.trainable_parameters()) out.push_back(p);
                          return out;
                        },
                    },
                    net);
}

double PhaseReport::initial_loss() const {
  return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.front().total;
}

double PhaseReport::final_loss() const {
  return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().total;
}

double PhaseReport::final_accuracy() const {
  return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().test_acc;
}

double evaluate(const Network& net, const data::Container& test, const DistillConfig& cfg) {
  data::BatchStream stream(test, cfg.eval_batch_size, 0, 0, cfg.normalize, {}, false);
  data::Batch batch;
  std::size_t correct = 0;
  while (stream.next(batch)) {
    Tape tape;
    const Var x = tape.constant(std::move(batch.images));
    const ForwardOutput out = forward(net, tape, x, nn::Role::frozen);
    const std::vector<int> pred = argmax_rows(out.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.count());
}

PhaseReport run_phase(int phase, std::optional<Network> teacher, const Network& trainee, const PhaseData& data,
                      const DistillConfig& cfg, std::uint64_t data_seed, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train == nullptr) throw ParamError("phase " + std::to_string(phase) + ": no training data");
  if (!teacher && !cfg.is_baseline()) {
    throw ParamError("phase " + std::to_string(phase) + ": distillation (rho or alpha nonzero) needs a teacher");
  }
  if (teacher) {
    const auto ts = tap_shapes(*teacher);
    const auto ss = tap_shapes(trainee);
    if (ts.size() != ss.size()) {
      throw ShapeError("phase " + std::to_string(phase) + ": teacher " + describe(*teacher) + " has " +
                       std::to_string(ts.size()) + " taps, trainee " + describe(trainee) + " has " +
                       std::to_string(ss.size()));
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (!(ts[i] == ss[i])) {
        throw ShapeError("phase " + std::to_string(phase) + ": tap " + std::to_string(i) +
                         " shape differs between teacher and trainee");
      }
    }
  }

  PhaseReport report;
  report.phase = phase;
  report.teacher = teacher ? describe(*teacher) : "none";
  report.trainee = describe(trainee);

  Pacemaker* const pm = std::holds_alternative<Pacemaker*>(trainee) ? std::get<Pacemaker*>(trainee) : nullptr;
  const bool use_features = pm == nullptr || cfg.phase1_feature_loss;
  const bool independent =
      pm != nullptr && pm->mode == PacemakerMode::ensemble && cfg.phase1_training == Phase1Training::independent;

  std::vector<Parameter*> params = trainable_parameters(trainee);
  for (Parameter* p : params) p->zero_grad();
  OptimState opt;
  opt.momentum = static_cast<float>(cfg.momentum);
  opt.weight_decay = static_cast<float>(cfg.weight_decay);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg.base_lr, cfg.milestones, cfg.factor);
    opt.lr = static_cast<float>(lr);
    data::BatchStream stream(*data.train, cfg.batch_size, data_seed, epoch, cfg.normalize, data.augment);
    data::Batch batch;
    double sum_fkd = 0.0, sum_lkd = 0.0, sum_ce = 0.0, sum_total = 0.0;
    std::size_t seen = 0;
    while (stream.next(batch)) {
      const double n = static_cast<double>(batch.labels.size());
      Tape tape;
      const Var x = tape.constant(std::move(batch.images));
      std::optional<ForwardOutput> t_out;
      if (teacher) t_out = forward(*teacher, tape, x, nn::Role::frozen);
      const ForwardOutput* tp = t_out ? &*t_out : nullptr;

      Var loss;
      double fkd = 0.0, lkd = 0.0, ce = 0.0;
      if (independent) {
        const ForwardOutput a = forward_with_taps(pm->row, tape, x, nn::Role::trainee);
        const ForwardOutput b = forward_with_taps(pm->column, tape, x, nn::Role::trainee);
        const LossParts la = combined_loss(tp, a, batch.labels, cfg, use_features, tape);
        const LossParts lb = combined_loss(tp, b, batch.labels, cfg, use_features, tape);
        const Var pair[] = {la.total, lb.total};
        const double ones[] = {1.0, 1.0};
        loss = weighted_sum(pair, ones);
        fkd = 0.5 * (scalar(la.fkd) + scalar(lb.fkd));
        lkd = 0.5 * (scalar(la.lkd) + scalar(lb.lkd));
        ce = 0.5 * (scalar(la.ce) + scalar(lb.ce));
      } else {
        const ForwardOutput s = forward(trainee, tape, x, nn::Role::trainee);
        const LossParts l = combined_loss(tp, s, batch.labels, cfg, use_features, tape);
        loss = l.total;
        fkd = scalar(l.fkd);
        lkd = scalar(l.lkd);
        ce = scalar(l.ce);
      }
      const double total = independent ? 0.5 * scalar(loss) : scalar(loss);
      if (!std::isfinite(total)) {
        throw Error("phase " + std::to_string(phase) + " epoch " + std::to_string(epoch) + ": non-finite loss");
      }
      tape.backward(loss);
      sgd_step(params, opt);
      for (Parameter* p : params) p->zero_grad();

      sum_fkd += fkd * n;
      sum_lkd += lkd * n;
      sum_ce += ce * n;
      sum_total += total * n;
      seen += batch.labels.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double denom = static_cast<double>(seen);
    rec.fkd = sum_fkd / denom;
    rec.lkd = sum_lkd / denom;
    rec.ce = sum_ce / denom;
    rec.total = sum_total / denom;
    rec.test_acc = data.test ? evaluate(trainee, *data.test, cfg) : std::numeric_limits<double>::quiet_NaN();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(phase, rec);
  }
  return report;
}

void transplant_weights(const nn::Model& source, nn::Model& target) {
  if (!(source.spec() == target.spec())) {
    throw MismatchError("transplant: source " + source.spec().id() + " vs target " + target.spec().id());
  }
  if (source.mode() != target.mode() || source.surgery() != target.surgery()) {
    throw MismatchError("transplant: source built as " + nn::to_string(source.mode()) + "/" +
                        nn::to_string(source.surgery()) + ", target as " + nn::to_string(target.mode()) + "/" +
                        nn::to_string(target.surgery()));
  }
  const auto& src = source.params();
  auto& dst = target.params();
  if (src.size() != dst.size()) {
    throw MismatchError("transplant: " + std::to_string(src.size()) + " source parameters vs " +
                        std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name) {
      throw MismatchError("transplant: parameter '" + dst[i].name + "' has no counterpart (source has '" +
                          src[i].name + "')");
    }
    if (!(src[i].value.shape() == dst[i].value.shape())) {
      throw MismatchError("transplant: parameter '" + dst[i].name + "' shape " + dst[i].value.shape().str() +
                          " vs source " + src[i].value.shape().str());
    }
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].value = src[i].value;
    dst[i].zero_grad();
  }
}

}  // namespace otf::kd
