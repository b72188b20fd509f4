// tests/test_inference.cpp

#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "ebt/inference.hpp"

using namespace ebt;
using ad::Tensor;
using inference::InferenceResult;
using sampler::SamplerConfig;

namespace {

std::vector<double> unit_rms_mu() {
  std::vector<double> mu(16);
  for (std::size_t i = 0; i < 16; ++i) mu[i] = (i % 3 == 1) ? -1.0 : 1.0;
  return mu;
}

// Contraction setting for the stub: alpha = 0.5 at every step.
SamplerConfig stub_config(double tau) {
  SamplerConfig c;
  c.eta_base = 0.75;  // eta = eta_base / 1.5 = 0.5
  c.energy_clamp = 0.0;
  c.tau = tau;
  return c;
}

model::ObservationWindow blank_window() { return {1, 1, {0.0}}; }

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Checks steps_used == min(n_max, first i with ||g_i|| <= tau) from the trace.
void check_cutoff_consistency(const InferenceResult& r, const SamplerConfig& cfg) {
  int expected = cfg.max_infer_steps;
  for (std::size_t i = 0; i < r.trace.steps.size(); ++i)
    if (r.trace.steps[i].grad_norm <= cfg.tau) {
      expected = static_cast<int>(i) + 1;
      break;
    }
  CHECK(r.steps_used == expected);
  CHECK(r.trace.steps.size() == static_cast<std::size_t>(r.steps_used));
  const bool cut = r.trace.terminated_by == sampler::Termination::grad_cutoff;
  CHECK(cut == (r.final_grad_norm <= cfg.tau));
}

class Blowup final : public model::EnergyFunction {
 public:
  Tensor encode(const Tensor& w) const override { return Tensor::zeros({w.dim(0), 1}); }
  Tensor energy(const Tensor&, const Tensor& y) const override {
    return ad::reshape(ad::sum_last(ad::log(ad::add_scalar(y, 3.0))), {y.dim(0)});
  }
  std::size_t window_size() const override { return 1; }
  std::size_t action_size() const override { return 2; }
};

}  // namespace

TEST_CASE("dynamic inference on the quadratic stub") {
  const auto mu = unit_rms_mu();
  model::QuadraticEnergy stub(mu, 1);

  SUBCASE("gradient cutoff before the budget, close to the minimum") {
    const auto cfg = stub_config(1e-3);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto r = inference::infer(stub, blank_window(), nullptr, cfg, rng);
      CHECK(r.status == inference::Status::ok);
      CHECK(r.trace.terminated_by == sampler::Termination::grad_cutoff);
      CHECK(r.steps_used < 20);
      CHECK(dist(r.trajectory.actions, mu) < 1e-3);
      CHECK(r.final_energy < 1e-6);
      for (std::size_t i = 1; i < r.trace.steps.size(); ++i)
        CHECK(r.trace.steps[i].energy < r.trace.steps[i - 1].energy);
      check_cutoff_consistency(r, cfg);
    }
  }

  SUBCASE("tau = infinity stops after one step") {
    const auto cfg = stub_config(std::numeric_limits<double>::infinity());
    Rng rng(1);
    const auto r = inference::infer(stub, blank_window(), nullptr, cfg, rng);
    CHECK(r.steps_used == 1);
    CHECK(r.trace.terminated_by == sampler::Termination::grad_cutoff);
  }

  SUBCASE("tau = 0 uses the whole budget") {
    const auto cfg = stub_config(0.0);
    Rng rng(1);
    const auto r = inference::infer(stub, blank_window(), nullptr, cfg, rng);
    CHECK(r.steps_used == 20);
    CHECK(r.trace.terminated_by == sampler::Termination::max_steps);
    CHECK(inference::uncertainty_signal(r, cfg).second == 1.0);
    check_cutoff_consistency(r, cfg);
  }

  SUBCASE("intermediate tau values are consistent with the trace") {
    for (double tau : {0.5, 0.05, 5e-3, 1e-6}) {
      const auto cfg = stub_config(tau);
      Rng rng(3);
      check_cutoff_consistency(inference::infer(stub, blank_window(), nullptr, cfg, rng), cfg);
    }
  }
}

TEST_CASE("infer_fixed") {
  const auto mu = unit_rms_mu();
  model::QuadraticEnergy stub(mu, 1);
  const auto cfg = stub_config(1e-3);

  Rng a(5), b(5);
  const auto ra = inference::infer_fixed(stub, blank_window(), nullptr, 2, cfg, a);
  const auto rb = inference::infer_fixed(stub, blank_window(), nullptr, 2, cfg, b);
  CHECK(ra.steps_used == 2);
  CHECK(ra.trajectory.actions == rb.trajectory.actions);
  CHECK(ra.trace.terminated_by == sampler::Termination::max_steps);

  Rng c(5);
  CHECK_THROWS_AS(inference::infer_fixed(stub, blank_window(), nullptr, 0, cfg, c), std::invalid_argument);
  CHECK_THROWS_AS(inference::infer_fixed(stub, blank_window(), nullptr, 21, cfg, c), std::invalid_argument);

  // Dynamic inference never exceeds the fixed budget on the same seed.
  Rng d(6), e(6);
  const auto fixed = inference::infer_fixed(stub, blank_window(), nullptr, 20, cfg, d);
  const auto dyn = inference::infer(stub, blank_window(), nullptr, cfg, e);
  CHECK(dyn.steps_used <= 20);
  for (std::size_t i = 0; i < dyn.trace.steps.size(); ++i)
    CHECK(dyn.trace.steps[i].candidate == fixed.trace.steps[i].candidate);
}

TEST_CASE("denormalized output and window checks") {
  const auto mu = unit_rms_mu();
  model::QuadraticEnergy stub(mu, 1);
  const auto cfg = stub_config(1e-3);
  envs::NormStats norm{{-0.2, -0.1}, {0.2, 0.3}};
  Rng rng(2);
  const auto r = inference::infer(stub, blank_window(), &norm, cfg, rng);
  CHECK_FALSE(r.trajectory.normalized);
  for (std::size_t i = 0; i < 16; ++i)
    CHECK(r.trajectory.actions[i] == doctest::Approx(norm.denormalize(mu[i], i % 2)).epsilon(1e-3));

  Rng rng2(2);
  CHECK_THROWS_AS(inference::infer(stub, {2, 1, {0.0, 0.0}}, nullptr, cfg, rng2), ad::ShapeError);
}

TEST_CASE("non-finite gradient aborts with the partial trace") {
  Blowup f;
  SamplerConfig cfg;
  cfg.presample_normalize = false;
  cfg.energy_clamp = 0.0;
  cfg.eta_base = 7.5;  // eta = 5
  cfg.tau = 0.0;
  Rng rng(0);
  const auto r = inference::infer(f, blank_window(), nullptr, cfg, rng);
  CHECK(r.status == inference::Status::aborted);
  CHECK_FALSE(r.error.empty());
  CHECK(r.trace.steps.size() == static_cast<std::size_t>(r.steps_used));
  CHECK(r.steps_used < 20);

  envs::NormStats norm{{-1, -1}, {1, 1}};
  inference::EbtPolicy policy(f, norm, cfg);
  Rng prng(0);
  CHECK_THROWS_AS(policy.act(blank_window(), {}, prng), std::runtime_error);
}

TEST_CASE("energy timeline csv") {
  envs::EpisodeRecord rec;
  rec.replans = {{0, 0.5, 3}, {4, 0.25, 1}};
  std::ostringstream os;
  inference::write_energy_timeline(os, rec);
  CHECK(os.str() == "frame,energy,steps_used\n0,0.5,3\n4,0.25,1\n");
}
