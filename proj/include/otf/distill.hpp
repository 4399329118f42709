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

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "otf/autograd.hpp"
#include "otf/data.hpp"
#include "otf/model.hpp"

namespace otf::kd {

enum class PacemakerMode { ensemble, column_only };
/// How the two pacemaker members are combined into one teacher signal.
enum class EnsembleCombine { mean_logits, mean_softmax };
/// Phase 1: one loss on the averaged ensemble output, or one loss per member.
enum class Phase1Training { joint, independent };
/// Where the phase-3 student starts from.
enum class Phase3Init {
  /// pacemaker_row in ensemble mode, phase2_student in column_only mode (no trained row member).
  automatic,
  pacemaker_row,
  phase2_student,
};

std::string to_string(PacemakerMode m);
std::string to_string(EnsembleCombine m);
std::string to_string(Phase1Training m);
std::string to_string(Phase3Init m);
PacemakerMode parse_pacemaker_mode(std::string_view s);
EnsembleCombine parse_ensemble_combine(std::string_view s);
Phase1Training parse_phase1_training(std::string_view s);
Phase3Init parse_phase3_init(std::string_view s);

struct DistillConfig {
  double tau = 4.0;
  double alpha = 0.9;
  double rho = 1.0;
  int epochs = 200;
  int batch_size = 128;
  double base_lr = 0.1;
  std::vector<int> milestones{60, 120, 160};
  double factor = 0.2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  bool tau_square_scaling = true;
  PacemakerMode pacemaker_mode = PacemakerMode::ensemble;
  EnsembleCombine ensemble_combine = EnsembleCombine::mean_logits;
  Phase1Training phase1_training = Phase1Training::joint;
  bool phase1_feature_loss = true;
  Phase3Init phase3_init = Phase3Init::automatic;
  std::uint64_t seed = 0;
  bool normalize = true;
  int eval_batch_size = 256;

  /// tau > 0, alpha in [0,1], rho = 0 (no feature term) or rho in [0.01, 5], epochs >= 0, ...
  void validate() const;
  /// Plain supervised training: rho = 0, alpha = 0.
  bool is_baseline() const { return rho == 0.0 && alpha == 0.0; }
};

/// Milestones of the 200-epoch schedule rescaled to a shorter run (60/120/160 -> 30%/60%/80%).
std::vector<int> scaled_milestones(int epochs);

/// Logits plus the tapped activations in tap order.
struct ForwardOutput {
  Var logits;
  std::vector<Var> features;
};

ForwardOutput forward_with_taps(nn::Model& model, Tape& tape, Var x, nn::Role role);

/// Intermediate teacher: a row-filter member and a column-filter member of the same ArchSpec.
struct Pacemaker {
  nn::Model row;
  nn::Model column;
  PacemakerMode mode = PacemakerMode::ensemble;
  EnsembleCombine combine = EnsembleCombine::mean_logits;
};

Pacemaker make_pacemaker(const nn::ArchSpec& spec, std::uint64_t seed, PacemakerMode mode,
                         EnsembleCombine combine, nn::SurgeryMode surgery = nn::SurgeryMode::interior);

/// Mean of member logits and of each member tap. In column_only mode the column member's
/// output is returned unchanged.
ForwardOutput ensemble_forward(nn::Model& row, nn::Model& col, Tape& tape, Var x, nn::Role role,
                               PacemakerMode mode = PacemakerMode::ensemble,
                               EnsembleCombine combine = EnsembleCombine::mean_logits);

/// Mean over taps of the per-tap mean squared difference; teacher side detached.
Var loss_fkd(std::span<const Var> teacher_feats, std::span<const Var> student_feats);
/// Batch-mean KL(softmax(t/tau) || softmax(s/tau)), times tau^2 when scaling is on.
Var loss_lkd(Var teacher_logits, Var student_logits, double tau, bool tau_square_scaling);
/// rho * fkd + alpha * lkd + (1 - alpha) * ce
Var total_loss(Var fkd, Var lkd, Var ce, const DistillConfig& cfg);

/// A network in a teacher or trainee role.
using Network = std::variant<nn::Model*, Pacemaker*>;

std::string describe(const Network& net);
ForwardOutput forward(const Network& net, Tape& tape, Var x, nn::Role role);
std::vector<nn::TapShape> tap_shapes(const Network& net);
std::vector<Parameter*> trainable_parameters(const Network& net);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double fkd = 0.0;
  double lkd = 0.0;
  double ce = 0.0;
  double total = 0.0;
  double test_acc = 0.0;
};

struct PhaseReport {
  int phase = 0;
  std::string teacher;
  std::string trainee;
  std::vector<EpochRecord> epochs;

  /// Mean total loss of the first and last epoch; NaN when no epoch ran.
  double initial_loss() const;
  double final_loss() const;
  double final_accuracy() const;
};

struct PhaseData {
  const data::Container* train = nullptr;
  const data::Container* test = nullptr;
  data::AugmentPolicy augment;
};

using EpochCallback = std::function<void(int phase, const EpochRecord&)>;

/// Top-1 accuracy in [0,1] of a frozen network over a whole container.
double evaluate(const Network& net, const data::Container& test, const DistillConfig& cfg);

/// Trains `trainee` against `teacher` (frozen, eval-mode BN) with the combined loss for
/// cfg.epochs epochs. Without a teacher the configuration must be the baseline (rho = alpha = 0).
/// A pacemaker trainee is trained through its ensemble output, or per member when
/// cfg.phase1_training is independent.
PhaseReport run_phase(int phase, std::optional<Network> teacher, const Network& trainee,
                      const PhaseData& data, const DistillConfig& cfg, std::uint64_t data_seed,
                      const EpochCallback& on_epoch = {});

/// Bitwise copy of every parameter (including BN running statistics) of `source` into
/// `target`. Both must be row builds of the same ArchSpec.
void transplant_weights(const nn::Model& source, nn::Model& target);

struct PipelineResult {
  Pacemaker pacemaker;
  nn::Model phase2_student;
  nn::Model student;
  std::array<PhaseReport, 3> reports;
  /// One line per executed phase: "phase=<k> teacher=<...> trainee=<...>".
  std::vector<std::string> log;
};

/// Called after each phase with the phase id and the networks trained so far.
using PhaseCallback = std::function<void(int phase, const PipelineResult& partial)>;

/// Teacher -> pacemaker, pacemaker -> student, teacher -> student. The phase-3 student starts
/// from the pacemaker's row member (or the phase-2 student, see Phase3Init).
PipelineResult run_pipeline(const nn::ArchSpec& spec, nn::Model& teacher, const PhaseData& data,
                            const DistillConfig& cfg,
                            nn::SurgeryMode surgery = nn::SurgeryMode::interior,
                            const PhaseCallback& on_phase = {}, const EpochCallback& on_epoch = {});

/// Deterministic sub-seed for a named role in a run.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace otf::kd
