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

#include "otf/distill.hpp"
#include "otf/error.hpp"

namespace otf::kd {
namespace {

// derive_seed tags; models use 1..4, per-phase data order 101..103.
constexpr std::uint64_t kPhase2StudentTag = 3;
constexpr std::uint64_t kPhase3StudentTag = 4;
constexpr std::uint64_t kDataTag = 100;

template <class F>
void run_guarded(int phase, F&& body) {
  try {
    body();
  } catch (const std::exception& e) {
    throw Error("pipeline aborted in phase " + std::to_string(phase) + ": " + e.what());
  }
}

}  // namespace

PipelineResult run_pipeline(const nn::ArchSpec& spec, nn::Model& teacher, const PhaseData& data,
                            const DistillConfig& cfg, nn::SurgeryMode surgery, const PhaseCallback& on_phase,
                            const EpochCallback& on_epoch) {
  cfg.validate();
  spec.validate();
  if (teacher.mode() != nn::FilterMode::teacher) {
    throw ParamError("pipeline teacher must be a teacher build, got " + nn::to_string(teacher.mode()));
  }
  if (!(teacher.spec() == spec)) {
    throw MismatchError("pipeline teacher is " + teacher.spec().id() + ", expected " + spec.id());
  }

  PipelineResult r;
  auto log_phase = [&](const PhaseReport& rep) {
    r.log.push_back("phase=" + std::to_string(rep.phase) + " teacher=" + rep.teacher + " trainee=" + rep.trainee);
  };

  run_guarded(1, [&] {
    r.pacemaker = make_pacemaker(spec, cfg.seed, cfg.pacemaker_mode, cfg.ensemble_combine, surgery);
    r.reports[0] = run_phase(1, Network{&teacher}, Network{&r.pacemaker}, data, cfg,
                             derive_seed(cfg.seed, kDataTag + 1), on_epoch);
  });
  log_phase(r.reports[0]);
  if (on_phase) on_phase(1, r);

  run_guarded(2, [&] {
    r.phase2_student = nn::build(spec, nn::FilterMode::row_student, surgery);
    nn::init_weights(r.phase2_student, derive_seed(cfg.seed, kPhase2StudentTag));
    r.reports[1] = run_phase(2, Network{&r.pacemaker}, Network{&r.phase2_student}, data, cfg,
                             derive_seed(cfg.seed, kDataTag + 2), on_epoch);
  });
  log_phase(r.reports[1]);
  if (on_phase) on_phase(2, r);

  run_guarded(3, [&] {
    r.student = nn::build(spec, nn::FilterMode::row_student, surgery);
    nn::init_weights(r.student, derive_seed(cfg.seed, kPhase3StudentTag));
    Phase3Init init = cfg.phase3_init;
    if (init == Phase3Init::automatic) {
      init = cfg.pacemaker_mode == PacemakerMode::ensemble ? Phase3Init::pacemaker_row : Phase3Init::phase2_student;
    }
    transplant_weights(init == Phase3Init::pacemaker_row ? r.pacemaker.row : r.phase2_student, r.student);
    r.reports[2] = run_phase(3, Network{&teacher}, Network{&r.student}, data, cfg,
                             derive_seed(cfg.seed, kDataTag + 3), on_epoch);
  });
  log_phase(r.reports[2]);
  if (on_phase) on_phase(3, r);
  return r;
}

}  // namespace otf::kd
