// src/sampler.cpp

#include "ebt/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

namespace ebt::sampler {

void SamplerConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("sampler config: " + m); };
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) fail("need 0 < sigma_min < sigma_max");
  if (!(eta_base > 0.0)) fail("eta_base must be > 0");
  if (!(step_scale > 1.0)) fail("step_scale (c) must be > 1");
  if (base_steps < 1) fail("base_steps must be >= 1");
  if (extra_steps < 0) fail("extra_steps must be >= 0");
  if (max_infer_steps < 1) fail("max_infer_steps must be >= 1");
  if (!(tau >= 0.0)) fail("tau must be >= 0 (0 disables the cutoff)");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(energy_clamp >= 0.0)) fail("energy_clamp must be >= 0");
  if (!(step_clamp_lo() > 0.0)) fail("step_clamp lower bound must be > 0");
  if (!(step_clamp_hi() >= step_clamp_lo())) fail("step_clamp upper bound below lower bound");
  if (!(rms_eps >= 0.0)) fail("rms_eps must be >= 0");
}

std::string to_string(Termination t) {
  return t == Termination::grad_cutoff ? "grad_cutoff" : "max_steps";
}

void ChainTrace::write_csv(std::ostream& os) const {
  os << "step,energy,grad_norm,alpha,sigma\n";
  char buf[160];
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", i, s.energy, s.grad_norm,
                  s.alpha, s.sigma);
    os << buf;
  }
}

double anneal_sigma(int t, int total, const SamplerConfig& cfg) {
  if (total < 1) throw std::invalid_argument("anneal_sigma: total steps must be >= 1");
  if (t < 0 || t > total)
    throw std::invalid_argument("anneal_sigma: step " + std::to_string(t) + " outside [0, " +
                                std::to_string(total) + "]");
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return cfg.sigma_min + 0.5 * (cfg.sigma_max - cfg.sigma_min) * (1.0 + std::cos(phase));
}

double sample_step_size(const SamplerConfig& cfg, Rng& rng) {
  const double mean = cfg.eta_base / cfg.step_scale;
  const double stddev = std::sqrt(cfg.eta_base * cfg.step_scale);
  return std::clamp(rng.normal(mean, stddev), cfg.step_clamp_lo(), cfg.step_clamp_hi());
}

double energy_scaled_alpha(double eta, double energy, const SamplerConfig& cfg) {
  return eta * std::exp(std::clamp(energy, -cfg.energy_clamp, cfg.energy_clamp));
}

Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from({rows, cols}, std::move(v));
}

StepResult refine_step(const model::EnergyFunction& f, const Tensor& z, const Tensor& y,
                       const Tensor& velocity, int step, int total, double eta,
                       const SamplerConfig& cfg, Rng& rng, Mode mode, bool create_graph) {
  if (y.rank() != 2 || y.dim(1) != f.action_size())
    throw ad::ShapeError("refine_step: expected candidates [B," + std::to_string(f.action_size()) +
                         "], got " + ad::shape_str(y.shape()));
  if (velocity.shape() != y.shape())
    throw ad::ShapeError("refine_step: velocity shape " + ad::shape_str(velocity.shape()) +
                         " does not match " + ad::shape_str(y.shape()));
  if (step < 0 || step >= total) throw std::invalid_argument("refine_step: need 0 <= step < total");
  const std::size_t rows = y.dim(0), cols = y.dim(1);
  const bool training = mode == Mode::training;

  Tensor current = cfg.presample_normalize ? ad::rms_normalize(y, cfg.rms_eps) : y;
  double sigma = 0.0;
  if (training || cfg.langevin_at_inference) {
    sigma = anneal_sigma(step, total, cfg);
    current = ad::add(current, gaussian(rows, cols, rng, sigma));
  }
  const bool nesterov = training || cfg.nesterov_at_inference;
  const double momentum = nesterov ? cfg.momentum : 0.0;
  const Tensor lookahead = momentum != 0.0 ? ad::add(current, ad::scale(velocity, momentum)) : current;

  const model::EnergyAndGrad eg = model::energy_grad(f, z, lookahead, create_graph);
  const auto g = eg.grad.data();
  for (double v : g)
    if (!std::isfinite(v)) throw ChainAborted("refine_step: non-finite energy gradient", {});

  std::vector<double> alpha(rows);
  StepResult out;
  out.entries.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double e = eg.energy[r];
    alpha[r] = energy_scaled_alpha(eta, e, cfg);
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += g[r * cols + c] * g[r * cols + c];
    out.entries[r].energy = e;
    out.entries[r].grad_norm = std::sqrt(sq);
    out.entries[r].alpha = alpha[r];
    out.entries[r].sigma = sigma;
  }
  const Tensor alpha_col = Tensor::from({rows, 1}, std::move(alpha));
  Tensor step_term = ad::mul(alpha_col, eg.grad);
  out.velocity = momentum != 0.0 ? ad::sub(ad::scale(velocity, momentum), step_term) : ad::neg(step_term);
  out.y = ad::add(current, out.velocity);

  const auto yd = out.y.data();
  for (std::size_t r = 0; r < rows; ++r)
    out.entries[r].candidate.assign(yd.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                    yd.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
  return out;
}

ChainResult run_chain(const model::EnergyFunction& f, const Tensor& z, const Tensor& y0, int steps,
                      double eta, const SamplerConfig& cfg, Rng& rng, Mode mode) {
  if (steps < 1) throw std::invalid_argument("run_chain: need at least one step");
  ChainResult out;
  out.traces.resize(y0.dim(0));
  Tensor y = y0;
  Tensor v = Tensor::zeros(y0.shape());
  for (int i = 0; i < steps; ++i) {
    StepResult s;
    try {
      s = refine_step(f, z, y, v, i, steps, eta, cfg, rng, mode);
    } catch (const ChainAborted& e) {
      throw ChainAborted(e.what(), out.traces);
    } catch (const ad::NonFiniteError& e) {
      throw ChainAborted(e.what(), out.traces);
    } catch (const model::LayerError& e) {
      throw ChainAborted(e.what(), out.traces);
    }
    for (std::size_t r = 0; r < s.entries.size(); ++r) out.traces[r].steps.push_back(std::move(s.entries[r]));
    y = s.y.detach();
    v = s.velocity.detach();
  }
  out.y = y;
  return out;
}

}  // namespace ebt::sampler
