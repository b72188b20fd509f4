// tests/test_sampler.cpp

#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "ebt/sampler.hpp"

using namespace ebt;
using ad::Tensor;
using sampler::Mode;
using sampler::SamplerConfig;

namespace {

// Entries +-1: mean square is exactly 1, so rms_normalize with eps 0 is exact.
std::vector<double> unit_rms_mu(std::size_t n) {
  std::vector<double> mu(n);
  for (std::size_t i = 0; i < n; ++i) mu[i] = (i % 3 == 0) ? -1.0 : 1.0;
  return mu;
}

Tensor row(const std::vector<double>& v) { return Tensor::from({1, v.size()}, v); }

// Noise off at inference, no momentum, alpha == eta exactly.
SamplerConfig plain_descent() {
  SamplerConfig c;
  c.momentum = 0.0;
  c.energy_clamp = 0.0;
  c.rms_eps = 0.0;
  c.step_lo = 1e-9;
  return c;
}

double dist(const Tensor& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Energy that goes non-finite once y drops below -c.
class LogBarrier final : public model::EnergyFunction {
 public:
  Tensor encode(const Tensor& w) const override { return Tensor::zeros({w.dim(0), 1}); }
  Tensor energy(const Tensor&, const Tensor& y) const override {
    return ad::reshape(ad::sum_last(ad::log(ad::add_scalar(y, 3.0))), {y.dim(0)});
  }
  std::size_t window_size() const override { return 1; }
  std::size_t action_size() const override { return 2; }
};

}  // namespace

TEST_CASE("anneal_sigma") {
  const SamplerConfig cfg;
  CHECK(std::abs(sampler::anneal_sigma(0, 10, cfg) - 0.2) <= 1e-12);
  CHECK(std::abs(sampler::anneal_sigma(10, 10, cfg) - 0.002) <= 1e-12);
  CHECK(std::abs(sampler::anneal_sigma(5, 10, cfg) - 0.101) <= 1e-12);
  CHECK_THROWS_AS(sampler::anneal_sigma(11, 10, cfg), std::invalid_argument);
  CHECK_THROWS_AS(sampler::anneal_sigma(0, 0, cfg), std::invalid_argument);

  for (int total = 1; total <= 64; ++total) {
    CHECK(std::abs(sampler::anneal_sigma(0, total, cfg) - cfg.sigma_max) <= 1e-12);
    CHECK(std::abs(sampler::anneal_sigma(total, total, cfg) - cfg.sigma_min) <= 1e-12);
    double prev = sampler::anneal_sigma(0, total, cfg);
    for (int t = 1; t <= total; ++t) {
      const double s = sampler::anneal_sigma(t, total, cfg);
      CHECK(s <= prev);
      CHECK(s >= cfg.sigma_min - 1e-15);
      CHECK(s <= cfg.sigma_max + 1e-15);
      prev = s;
    }
  }
}

TEST_CASE("sample_step_size") {
  SamplerConfig cfg;
  Rng rng(1);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += sampler::sample_step_size(cfg, rng);
  CHECK(sum / n == doctest::Approx(1000.0 / 1.5).epsilon(0.01));

  cfg.step_lo = 1.0;
  cfg.step_hi = 5000.0;
  // Widen the spread so the clamp actually engages.
  cfg.eta_base = 1e6;
  cfg.step_scale = 1e3;
  cfg.step_lo = 1.0;
  cfg.step_hi = 5000.0;
  for (int i = 0; i < 1000; ++i) {
    const double v = sampler::sample_step_size(cfg, rng);
    CHECK(v >= 1.0);
    CHECK(v <= 5000.0);
  }

  SamplerConfig table1;
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(sampler::sample_step_size(table1, a) == sampler::sample_step_size(table1, b));
}

TEST_CASE("energy_scaled_alpha") {
  SamplerConfig cfg;
  CHECK(sampler::energy_scaled_alpha(1000, 0.0, cfg) == 1000.0);
  CHECK(sampler::energy_scaled_alpha(1000, std::log(2.0), cfg) == doctest::Approx(2000.0).epsilon(1e-14));
  CHECK(sampler::energy_scaled_alpha(1000, 100.0, cfg) == doctest::Approx(148413.159102576).epsilon(1e-12));
  CHECK(sampler::energy_scaled_alpha(1000, -100.0, cfg) == doctest::Approx(1000.0 * std::exp(-5.0)));
}

TEST_CASE("refine_step on the quadratic stub") {
  const auto mu = unit_rms_mu(16);
  model::QuadraticEnergy stub(mu, 1);
  const Tensor z = Tensor::zeros({1, 1});
  Rng rng(3);

  SUBCASE("linear contraction without normalization") {
    SamplerConfig cfg = plain_descent();
    cfg.presample_normalize = false;
    const double a = 0.3;
    std::vector<double> y0(16);
    for (auto& v : y0) v = rng.uniform(-2, 2);
    auto s = sampler::refine_step(stub, z, row(y0), Tensor::zeros({1, 16}), 0, 1, a, cfg, rng,
                                  Mode::inference);
    for (std::size_t i = 0; i < 16; ++i)
      CHECK(s.y[i] - mu[i] == doctest::Approx((1 - a) * (y0[i] - mu[i])).epsilon(1e-13));
    CHECK(s.entries[0].alpha == a);
    CHECK(s.entries[0].sigma == 0.0);
  }

  SUBCASE("unit-rms minimum is a fixed point") {
    SamplerConfig cfg = plain_descent();
    auto s = sampler::refine_step(stub, z, row(mu), Tensor::zeros({1, 16}), 0, 1, 0.7, cfg, rng,
                                  Mode::inference);
    CHECK(s.y.to_vector() == mu);
  }

  SUBCASE("plain gradient descent composition") {
    // normalize, then y - eta * dE/dy, evaluated by hand.
    SamplerConfig cfg = plain_descent();
    std::vector<double> y0(16);
    for (auto& v : y0) v = rng.uniform(-2, 2);
    const double eta = 0.4;
    auto s = sampler::refine_step(stub, z, row(y0), Tensor::zeros({1, 16}), 0, 1, eta, cfg, rng,
                                  Mode::inference);
    double ms = 0.0;
    for (double v : y0) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / 16.0);
    for (std::size_t i = 0; i < 16; ++i) {
      const double n = y0[i] * inv;
      CHECK(s.y[i] == doctest::Approx(n - eta * (n - mu[i])).epsilon(1e-15));
    }
  }

  SUBCASE("nesterov lookahead") {
    SamplerConfig cfg = plain_descent();
    cfg.presample_normalize = false;
    cfg.momentum = 0.9;
    cfg.nesterov_at_inference = true;
    std::vector<double> y0(16), v0(16);
    for (auto& v : y0) v = rng.uniform(-1, 1);
    for (auto& v : v0) v = rng.uniform(-0.1, 0.1);
    const double eta = 0.2;
    auto s = sampler::refine_step(stub, z, row(y0), row(v0), 0, 1, eta, cfg, rng, Mode::inference);
    for (std::size_t i = 0; i < 16; ++i) {
      const double g = y0[i] + 0.9 * v0[i] - mu[i];
      const double v1 = 0.9 * v0[i] - eta * g;
      CHECK(s.velocity[i] == doctest::Approx(v1).epsilon(1e-14));
      CHECK(s.y[i] == doctest::Approx(y0[i] + v1).epsilon(1e-14));
    }
  }

  SUBCASE("training step injects sigma_max noise at step 0") {
    SamplerConfig cfg;
    cfg.rms_eps = 0.0;
    const std::size_t rows = 5000;
    std::vector<double> ys;
    for (std::size_t r = 0; r < rows; ++r) ys.insert(ys.end(), mu.begin(), mu.end());
    Tensor y = Tensor::from({rows, 16}, ys);
    auto s = sampler::refine_step(stub, Tensor::zeros({rows, 1}), y, Tensor::zeros({rows, 16}), 0, 7,
                                  0.0, cfg, rng, Mode::training);
    CHECK(s.entries[0].sigma == 0.2);
    double sq = 0.0;
    for (std::size_t k = 0; k < rows * 16; ++k) sq += (s.y[k] - ys[k]) * (s.y[k] - ys[k]);
    CHECK(std::sqrt(sq / (rows * 16.0)) == doctest::Approx(0.2).epsilon(0.01));
  }
}

TEST_CASE("run_chain") {
  const auto mu = unit_rms_mu(16);
  model::QuadraticEnergy stub(mu, 1);
  const Tensor z = Tensor::zeros({1, 1});

  SUBCASE("converges on the stub") {
    SamplerConfig cfg = plain_descent();
    cfg.rms_eps = 1e-6;
    Rng rng(4);
    const Tensor y0 = sampler::gaussian(1, 16, rng);
    auto r = sampler::run_chain(stub, z, y0, 50, 0.3, cfg, rng, Mode::inference);
    CHECK(dist(r.y, mu) < 1e-3);
    REQUIRE(r.traces.size() == 1);
    CHECK(r.traces[0].steps.size() == 50);
    // Energy non-increasing with noise and momentum off.
    for (std::size_t i = 1; i < r.traces[0].steps.size(); ++i)
      CHECK(r.traces[0].steps[i].energy <= r.traces[0].steps[i - 1].energy);
  }

  SUBCASE("one step gives one trace entry") {
    Rng rng(5);
    auto r = sampler::run_chain(stub, z, sampler::gaussian(1, 16, rng), 1, 0.5, plain_descent(), rng,
                                Mode::inference);
    CHECK(r.traces[0].steps.size() == 1);
  }

  SUBCASE("Langevin-only chains accumulate the annealed variances") {
    SamplerConfig cfg;
    cfg.presample_normalize = false;
    const int steps = 8;
    const std::size_t chains = 10000;
    Rng rng(6);
    const Tensor y0 = sampler::gaussian(chains, 16, rng);
    auto r = sampler::run_chain(stub, Tensor::zeros({chains, 1}), y0, steps, 0.0, cfg, rng,
                                Mode::training);
    double expected = 0.0;
    for (int i = 0; i < steps; ++i) expected += std::pow(sampler::anneal_sigma(i, steps, cfg), 2);
    double sum = 0.0, sq = 0.0;
    const std::size_t n = chains * 16;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = r.y[k] - y0[k];
      sum += d;
      sq += d * d;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(var == doctest::Approx(expected).epsilon(0.05));
  }

  SUBCASE("same seed gives identical traces") {
    SamplerConfig cfg;
    auto run = [&] {
      Rng rng(77);
      const Tensor y0 = sampler::gaussian(3, 16, rng);
      return sampler::run_chain(stub, Tensor::zeros({3, 1}), y0, 9, 0.2, cfg, rng, Mode::training);
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t r = 0; r < 3; ++r) {
      REQUIRE(a.traces[r].steps.size() == b.traces[r].steps.size());
      for (std::size_t i = 0; i < a.traces[r].steps.size(); ++i) {
        CHECK(a.traces[r].steps[i].candidate == b.traces[r].steps[i].candidate);
        CHECK(a.traces[r].steps[i].energy == b.traces[r].steps[i].energy);
        CHECK(a.traces[r].steps[i].alpha == b.traces[r].steps[i].alpha);
      }
    }
  }

  SUBCASE("non-finite gradient aborts with the partial trace") {
    LogBarrier barrier;
    SamplerConfig cfg = plain_descent();
    cfg.presample_normalize = false;
    Rng rng(1);
    try {
      sampler::run_chain(barrier, Tensor::zeros({1, 1}), Tensor::zeros({1, 2}), 10, 5.0, cfg, rng,
                         Mode::inference);
      FAIL("expected ChainAborted");
    } catch (const sampler::ChainAborted& e) {
      REQUIRE(e.partial().size() == 1);
      CHECK(e.partial()[0].steps.size() == 2);
    }
  }
}

TEST_CASE("trace csv") {
  sampler::ChainTrace t;
  t.steps.push_back({{0.0}, 1.5, 0.25, 1000.0, 0.2});
  t.steps.push_back({{0.0}, 0.5, 0.125, 500.0, 0.0});
  std::ostringstream os;
  t.write_csv(os);
  CHECK(os.str() == "step,energy,grad_norm,alpha,sigma\n0,1.5,0.25,1000,0.20000000000000001\n1,0.5,0.125,500,0\n");
}

TEST_CASE("config validation") {
  SamplerConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.step_clamp_lo() == 10.0);
  CHECK(c.step_clamp_hi() == 2000.0);
  SamplerConfig bad = c;
  bad.sigma_min = 0.3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.step_scale = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.step_lo = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
