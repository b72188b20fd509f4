// src/inference.cpp

#include "ebt/inference.hpp"

#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace ebt::inference {

namespace {

InferenceResult run(const model::EnergyFunction& f, const ObservationWindow& window,
                    const envs::NormStats* norm, int budget, bool cutoff,
                    const sampler::SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  if (window.history * window.obs_dim != f.window_size() || window.states.size() != f.window_size())
    throw ad::ShapeError("infer: window has " + std::to_string(window.states.size()) + " values, model expects " +
                         std::to_string(f.window_size()));
  const std::size_t d = f.action_size();
  ad::Tensor z;
  {
    ad::NoGradGuard off;
    z = f.encode(model::stack_windows({window}));
  }
  const double eta = cfg.inference_eta();

  InferenceResult out;
  ad::Tensor y = sampler::gaussian(1, d, rng);
  ad::Tensor v = ad::Tensor::zeros({1, d});
  for (int i = 0; i < budget; ++i) {
    sampler::StepResult s;
    try {
      s = sampler::refine_step(f, z, y, v, i, budget, eta, cfg, rng, sampler::Mode::inference);
    } catch (const std::runtime_error& e) {
      // Non-finite gradient or activation: keep what was completed.
      out.status = Status::aborted;
      out.error = e.what();
      break;
    }
    const auto& e = s.entries[0];
    out.final_energy = e.energy;
    out.final_grad_norm = e.grad_norm;
    out.trace.steps.push_back(e);
    out.steps_used = i + 1;
    y = s.y.detach();
    v = s.velocity.detach();
    if (cutoff && e.grad_norm <= cfg.tau) {
      out.trace.terminated_by = sampler::Termination::grad_cutoff;
      break;
    }
  }
  out.trajectory.action_dim = envs::kActionDim;
  out.trajectory.horizon = d / envs::kActionDim;
  out.trajectory.actions = y.to_vector();
  out.trajectory.normalized = true;
  if (norm) out.trajectory = norm->denormalize(out.trajectory);
  return out;
}

}  // namespace

InferenceResult infer(const model::EnergyFunction& f, const ObservationWindow& window,
                      const envs::NormStats* norm, const sampler::SamplerConfig& cfg, Rng& rng) {
  return run(f, window, norm, cfg.max_infer_steps, true, cfg, rng);
}

InferenceResult infer_fixed(const model::EnergyFunction& f, const ObservationWindow& window,
                            const envs::NormStats* norm, int steps, const sampler::SamplerConfig& cfg,
                            Rng& rng) {
  if (steps < 1 || steps > cfg.max_infer_steps)
    throw std::invalid_argument("infer_fixed: steps must be in [1, " + std::to_string(cfg.max_infer_steps) + "]");
  return run(f, window, norm, steps, false, cfg, rng);
}

std::pair<double, double> uncertainty_signal(const InferenceResult& r, const sampler::SamplerConfig& cfg) {
  return {r.final_energy, static_cast<double>(r.steps_used) / static_cast<double>(cfg.max_infer_steps)};
}

void write_energy_timeline(std::ostream& os, const envs::EpisodeRecord& rec) {
  os << "frame,energy,steps_used\n";
  char buf[96];
  for (const auto& r : rec.replans) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%d\n", r.time, r.energy, r.steps_used);
    os << buf;
  }
}

EbtPolicy::EbtPolicy(const model::EnergyFunction& f, envs::NormStats norm, sampler::SamplerConfig cfg, int steps)
    : f_(f), norm_(std::move(norm)), cfg_(cfg), steps_(steps) {
  norm_.validate();
  cfg_.validate();
}

envs::PolicyOutput EbtPolicy::act(const ObservationWindow& window, const envs::EnvState&, Rng& rng) {
  last_ = steps_ > 0 ? infer_fixed(f_, window, &norm_, steps_, cfg_, rng) : infer(f_, window, &norm_, cfg_, rng);
  if (last_.status == Status::aborted) throw std::runtime_error(last_.error);
  return {last_.trajectory, last_.final_energy, last_.steps_used};
}

}  // namespace ebt::inference
