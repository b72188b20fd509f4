// ebt/diffusion.hpp
//
// Toy DDPM baseline. The denoiser is the energy model's backbone with a noise
// head; the diffusion timestep enters as a sinusoidal embedding added to the
// context vector z. Sampling is ancestral, on an evenly strided subsequence of
// the training timesteps when fewer steps are requested.

#pragma once

#include <cstddef>
#include <vector>

#include "ebt/energy_model.hpp"
#include "ebt/envs.hpp"
#include "ebt/rng.hpp"
#include "ebt/trainer.hpp"

namespace ebt::diffusion {

using ad::Tensor;

struct DiffusionSchedule {
  int steps = 0;                    // T_train
  std::vector<double> betas;        // beta_t, t = 0..T-1
  std::vector<double> alphas;       // 1 - beta_t
  std::vector<double> alpha_bars;   // prod_{s<=t} alpha_s

  void validate() const;
};

// Linear betas from beta_start to beta_end over T steps.
DiffusionSchedule linear_schedule(int steps, double beta_start, double beta_end);

struct DiffusionConfig {
  int train_steps = 100;
  // Endpoints of the usual 1000-step schedule (1e-4, 0.02) scaled by 1000/T,
  // so that alpha_bar at T is ~5e-5 and the terminal marginal is N(0, I).
  double beta_start = 1e-3;
  double beta_end = 0.2;
  bool time_embedding = true;
  bool clip_x0 = true;

  DiffusionSchedule schedule() const { return linear_schedule(train_steps, beta_start, beta_end); }
};

// [B, dim] sinusoidal embedding of integer timesteps.
Tensor timestep_embedding(const std::vector<int>& t, std::size_t dim);

// Predicts the added noise from (context, noisy action, timestep).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Tensor encode(const Tensor& windows) const = 0;
  virtual Tensor predict(const Tensor& z, const Tensor& y_t, const std::vector<int>& t) const = 0;
  virtual std::size_t action_size() const = 0;
};

class Denoiser final : public NoisePredictor {
 public:
  // `model` must have a noise head.
  Denoiser(model::EnergyModel& model, bool time_embedding = true);
  Tensor encode(const Tensor& windows) const override { return model_.encode(windows); }
  Tensor predict(const Tensor& z, const Tensor& y_t, const std::vector<int>& t) const override;
  std::size_t action_size() const override { return model_.action_size(); }
  model::EnergyModel& model() const { return model_; }

 private:
  model::EnergyModel& model_;
  bool time_embedding_;
};

// sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, row-wise t.
Tensor corrupt(const Tensor& y0, const Tensor& eps, const std::vector<int>& t, const DiffusionSchedule& s);

struct DdpmLoss {
  Tensor loss;               // MSE(eps_hat, eps)
  std::vector<int> t;
  Tensor eps;
};

// Draws t ~ U{0..T-1} and eps ~ N(0, I) per row and returns the noise-prediction loss.
DdpmLoss ddpm_loss(const NoisePredictor& f, const Tensor& windows, const Tensor& y0,
                   const DiffusionSchedule& s, Rng& rng);

// Ancestral sampling from pure noise with `steps` denoising steps (1..T).
// Returns [B, action_size] in normalized coordinates.
Tensor ddpm_sample(const NoisePredictor& f, const Tensor& z, const DiffusionSchedule& s, int steps,
                   Rng& rng, bool clip_x0 = true);

// The timesteps visited by ddpm_sample, largest first.
std::vector<int> strided_timesteps(int train_steps, int steps);

// One epoch of noise-prediction training with the same optimizer and clipping
// as the energy model.
class DdpmTrainer {
 public:
  DdpmTrainer(Denoiser& denoiser, train::TrainConfig tcfg, DiffusionConfig dcfg);
  train::EpochReport train_epoch(const train::TrainingSet& data, Rng& rng);
  // Mean loss over the set with a fixed rng, no update.
  double evaluate(const train::TrainingSet& data, Rng& rng) const;

 private:
  Denoiser& denoiser_;
  train::TrainConfig tcfg_;
  DiffusionConfig dcfg_;
  DiffusionSchedule schedule_;
  train::Adam adam_;
  int epoch_ = 0;
};

class DiffusionPolicy final : public envs::Policy {
 public:
  DiffusionPolicy(const Denoiser& denoiser, envs::NormStats norm, DiffusionConfig cfg, int steps);
  envs::PolicyOutput act(const model::ObservationWindow& window, const envs::EnvState& state, Rng& rng) override;

 private:
  const Denoiser& denoiser_;
  envs::NormStats norm_;
  DiffusionConfig cfg_;
  DiffusionSchedule schedule_;
  int steps_;
};

}  // namespace ebt::diffusion
