// ebt/inference.hpp
//
// Dynamic inference: start from y0 ~ N(0, I) and descend the energy with the
// refinement step until the gradient norm falls to tau or the step budget
// runs out. Step size is deterministic (eta_base / c) and, by default, no
// noise or momentum is used.

#pragma once

#include <iosfwd>
#include <string>
#include <utility>

#include "ebt/energy_model.hpp"
#include "ebt/envs.hpp"
#include "ebt/rng.hpp"
#include "ebt/sampler.hpp"

namespace ebt::inference {

using model::ActionTrajectory;
using model::ObservationWindow;

enum class Status { ok, aborted };

struct InferenceResult {
  ActionTrajectory trajectory;  // environment units when norm stats were given
  int steps_used = 0;
  double final_energy = 0.0;
  double final_grad_norm = 0.0;
  sampler::ChainTrace trace;
  Status status = Status::ok;
  std::string error;  // set when aborted; trace holds the completed steps
};

// `norm` may be null, in which case the trajectory is left normalized.
InferenceResult infer(const model::EnergyFunction& f, const ObservationWindow& window,
                      const envs::NormStats* norm, const sampler::SamplerConfig& cfg, Rng& rng);

// Exactly `steps` refinement steps, no cutoff.
InferenceResult infer_fixed(const model::EnergyFunction& f, const ObservationWindow& window,
                            const envs::NormStats* norm, int steps, const sampler::SamplerConfig& cfg,
                            Rng& rng);

// (final energy, steps_used / max_infer_steps).
std::pair<double, double> uncertainty_signal(const InferenceResult& r, const sampler::SamplerConfig& cfg);

// frame,energy,steps_used: one row per re-plan of the episode.
void write_energy_timeline(std::ostream& os, const envs::EpisodeRecord& rec);

// Receding-horizon adapter. steps = 0 selects dynamic inference.
class EbtPolicy final : public envs::Policy {
 public:
  EbtPolicy(const model::EnergyFunction& f, envs::NormStats norm, sampler::SamplerConfig cfg, int steps = 0);
  envs::PolicyOutput act(const ObservationWindow& window, const envs::EnvState& state, Rng& rng) override;
  const InferenceResult& last() const { return last_; }

 private:
  const model::EnergyFunction& f_;
  envs::NormStats norm_;
  sampler::SamplerConfig cfg_;
  int steps_;
  InferenceResult last_;
};

}  // namespace ebt::inference
