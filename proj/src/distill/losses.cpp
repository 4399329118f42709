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

#include "otf/distill.hpp"
#include "otf/error.hpp"
#include "otf/ops.hpp"

namespace otf::kd {

std::string to_string(PacemakerMode m) {
  return m == PacemakerMode::ensemble ? "ensemble" : "column_only";
}

std::string to_string(EnsembleCombine m) {
  return m == EnsembleCombine::mean_logits ? "mean_logits" : "mean_softmax";
}

std::string to_string(Phase1Training m) { return m == Phase1Training::joint ? "joint" : "independent"; }

std::string to_string(Phase3Init m) {
  switch (m) {
    case Phase3Init::automatic: return "auto";
    case Phase3Init::pacemaker_row: return "pacemaker_row";
    case Phase3Init::phase2_student: return "phase2_student";
  }
  return "?";
}

PacemakerMode parse_pacemaker_mode(std::string_view s) {
  if (s == "ensemble") return PacemakerMode::ensemble;
  if (s == "column_only" || s == "column-only") return PacemakerMode::column_only;
  throw ParamError("unknown pacemaker mode '" + std::string(s) + "' (ensemble|column_only)");
}

EnsembleCombine parse_ensemble_combine(std::string_view s) {
  if (s == "mean_logits") return EnsembleCombine::mean_logits;
  if (s == "mean_softmax") return EnsembleCombine::mean_softmax;
  throw ParamError("unknown ensemble combine '" + std::string(s) + "' (mean_logits|mean_softmax)");
}

Phase1Training parse_phase1_training(std::string_view s) {
  if (s == "joint") return Phase1Training::joint;
  if (s == "independent") return Phase1Training::independent;
  throw ParamError("unknown phase-1 training '" + std::string(s) + "' (joint|independent)");
}

Phase3Init parse_phase3_init(std::string_view s) {
  if (s == "auto") return Phase3Init::automatic;
  if (s == "pacemaker_row") return Phase3Init::pacemaker_row;
  if (s == "phase2_student") return Phase3Init::phase2_student;
  throw ParamError("unknown phase-3 init '" + std::string(s) + "' (auto|pacemaker_row|phase2_student)");
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw ParamError("tau must be > 0, got " + std::to_string(tau));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParamError("alpha must lie in [0,1], got " + std::to_string(alpha));
  if (!(rho == 0.0 || (rho >= 0.01 && rho <= 5.0))) {
    throw ParamError("rho must be 0 or lie in [0.01, 5], got " + std::to_string(rho));
  }
  if (epochs < 0) throw ParamError("epochs must be >= 0");
  if (batch_size < 1) throw ParamError("batch_size must be >= 1");
  if (eval_batch_size < 1) throw ParamError("eval_batch_size must be >= 1");
  if (!(base_lr >= 0.0)) throw ParamError("base_lr must be >= 0");
  if (!(factor > 0.0)) throw ParamError("factor must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParamError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ParamError("weight_decay must be >= 0");
  for (int m : milestones) {
    if (m < 0) throw ParamError("milestones must be >= 0");
  }
}

std::vector<int> scaled_milestones(int epochs) {
  std::vector<int> out;
  for (int m : {60, 120, 160}) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(m) * epochs / 200.0)));
  }
  return out;
}

ForwardOutput forward_with_taps(nn::Model& model, Tape& tape, Var x, nn::Role role) {
  const std::vector<Var> outs = nn::run_graph(model, tape, x, role);
  ForwardOutput fo;
  fo.logits = outs.back();
  for (int t : model.taps()) fo.features.push_back(outs[static_cast<std::size_t>(t)]);
  return fo;
}

Pacemaker make_pacemaker(const nn::ArchSpec& spec, std::uint64_t seed, PacemakerMode mode,
                         EnsembleCombine combine, nn::SurgeryMode surgery) {
  Pacemaker pm{nn::build(spec, nn::FilterMode::row_student, surgery),
               nn::build(spec, nn::FilterMode::column, surgery), mode, combine};
  nn::init_weights(pm.row, derive_seed(seed, 1));
  nn::init_weights(pm.column, derive_seed(seed, 2));
  return pm;
}

ForwardOutput ensemble_forward(nn::Model& row, nn::Model& col, Tape& tape, Var x, nn::Role role,
                               PacemakerMode mode, EnsembleCombine combine) {
  if (mode == PacemakerMode::column_only) return forward_with_taps(col, tape, x, role);
  if (row.tap_shapes() != col.tap_shapes()) {
    throw ShapeError("pacemaker members " + row.spec().id() + "/" + col.spec().id() +
                     " have different tapped-feature shapes");
  }
  ForwardOutput a = forward_with_taps(row, tape, x, role);
  ForwardOutput b = forward_with_taps(col, tape, x, role);
  ForwardOutput out;
  if (combine == EnsembleCombine::mean_logits) {
    const Var pair[] = {a.logits, b.logits};
    out.logits = mean_of(pair);
  } else {
    out.logits = log_mean_softmax(a.logits, b.logits);
  }
  for (std::size_t i = 0; i < a.features.size(); ++i) {
    const Var pair[] = {a.features[i], b.features[i]};
    out.features.push_back(mean_of(pair));
  }
  return out;
}

Var loss_fkd(std::span<const Var> teacher_feats, std::span<const Var> student_feats) {
  if (teacher_feats.size() != student_feats.size() || student_feats.empty()) {
    throw ShapeError("feature loss: " + std::to_string(teacher_feats.size()) + " teacher taps vs " +
                     std::to_string(student_feats.size()) + " student taps");
  }
  std::vector<Var> terms;
  for (std::size_t i = 0; i < student_feats.size(); ++i) {
    if (teacher_feats[i].shape() != student_feats[i].shape()) {
      throw ShapeError("feature loss: tap " + std::to_string(i) + " teacher " + teacher_feats[i].shape().str() +
                       " vs student " + student_feats[i].shape().str());
    }
    terms.push_back(mse(teacher_feats[i], student_feats[i]));
  }
  const std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return weighted_sum(terms, w);
}

Var loss_lkd(Var teacher_logits, Var student_logits, double tau, bool tau_square_scaling) {
  return kl_div_temperature(teacher_logits, student_logits, tau, tau_square_scaling ? tau * tau : 1.0);
}

Var total_loss(Var fkd, Var lkd, Var ce, const DistillConfig& cfg) {
  const Var terms[] = {fkd, lkd, ce};
  const double coeffs[] = {cfg.rho, cfg.alpha, 1.0 - cfg.alpha};
  return weighted_sum(terms, coeffs);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  // splitmix64 finaliser over the combined value.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace otf::kd
