// ebt/sampler.hpp
//
// The refinement chain shared by training and inference. One step:
//
//   y  <- rms_normalize(y)                      pre-sample normalization
//   y  <- y + N(0, sigma_i^2 I)                 annealed Langevin noise (training,
//                                               or inference when enabled)
//   la <- y + momentum * v                      Nesterov lookahead (when active)
//   g  <- dE/dy at (z, la)
//   a  <- eta * exp(clamp(E(z, la)))            energy-scaled step size, per row
//   v  <- momentum * v - a * g
//   y  <- y + v
//
// With momentum 0 the last two lines are plain descent y - a * g.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebt/energy_model.hpp"
#include "ebt/rng.hpp"
#include "ebt/tensor.hpp"

namespace ebt::sampler {

using ad::Tensor;

struct SamplerConfig {
  double eta_base = 1000.0;    // base step size
  double step_scale = 1.5;     // c: draws are N(eta_base / c, variance eta_base * c)
  double sigma_min = 0.002;
  double sigma_max = 0.2;
  int base_steps = 6;          // training chain length before randomization
  int extra_steps = 3;         // up to this many more, uniformly
  int max_infer_steps = 20;
  double tau = 0.05;           // gradient-norm cutoff at inference
  double momentum = 0.9;
  double energy_clamp = 5.0;   // |E| bound inside exp()
  // Bounds on sampled step sizes; default (eta_base / 100, 2 * eta_base).
  std::optional<double> step_lo;
  std::optional<double> step_hi;
  bool langevin_at_inference = false;
  bool nesterov_at_inference = false;
  bool presample_normalize = true;
  double rms_eps = 1e-6;

  double step_clamp_lo() const { return step_lo.value_or(eta_base / 100.0); }
  double step_clamp_hi() const { return step_hi.value_or(2.0 * eta_base); }
  // Inference does not randomize: eta = eta_base / c.
  double inference_eta() const { return eta_base / step_scale; }
  void validate() const;
};

enum class Mode { training, inference };
enum class Termination { max_steps, grad_cutoff };

std::string to_string(Termination t);

struct TraceStep {
  std::vector<double> candidate;  // y after this step's update
  double energy = 0.0;            // at the point the gradient was taken
  double grad_norm = 0.0;
  double alpha = 0.0;
  double sigma = 0.0;             // injected noise std, 0 when none
};

struct ChainTrace {
  std::vector<TraceStep> steps;
  Termination terminated_by = Termination::max_steps;

  // step,energy,grad_norm,alpha,sigma
  void write_csv(std::ostream& os) const;
};

// Thrown when a gradient goes non-finite; carries the steps completed so far.
class ChainAborted : public std::runtime_error {
 public:
  ChainAborted(const std::string& what, std::vector<ChainTrace> partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const std::vector<ChainTrace>& partial() const { return partial_; }

 private:
  std::vector<ChainTrace> partial_;
};

// sigma_t = sigma_min + (sigma_max - sigma_min) (1 + cos(pi t / T)) / 2
double anneal_sigma(int t, int total, const SamplerConfig& cfg);

// eta ~ N(eta_base / c, eta_base * c), clamped to the step bounds.
double sample_step_size(const SamplerConfig& cfg, Rng& rng);

// eta * exp(clamp(E, -energy_clamp, energy_clamp)).
double energy_scaled_alpha(double eta, double energy, const SamplerConfig& cfg);

struct StepResult {
  Tensor y;         // [B, D]
  Tensor velocity;  // [B, D]
  std::vector<TraceStep> entries;  // one per row
};

// One refinement step over a batch. With create_graph the gradient is kept
// differentiable so a loss on the result can be taken w.r.t. parameters; the
// step-size scale exp(E) is always treated as a constant.
StepResult refine_step(const model::EnergyFunction& f, const Tensor& z, const Tensor& y,
                       const Tensor& velocity, int step, int total, double eta,
                       const SamplerConfig& cfg, Rng& rng, Mode mode, bool create_graph = false);

struct ChainResult {
  Tensor y;
  std::vector<ChainTrace> traces;  // one per row
};

// `steps` refinement steps from y0 with zero initial velocity.
ChainResult run_chain(const model::EnergyFunction& f, const Tensor& z, const Tensor& y0, int steps,
                      double eta, const SamplerConfig& cfg, Rng& rng, Mode mode);

// Standard normal [rows, cols] from rng.
Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);

}  // namespace ebt::sampler
