// src/diffusion.cpp

#include "ebt/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "ebt/sampler.hpp"

namespace ebt::diffusion {

void DiffusionSchedule::validate() const {
  if (steps < 1) throw std::invalid_argument("diffusion schedule: need at least one step");
  if (betas.size() != static_cast<std::size_t>(steps)) throw std::invalid_argument("diffusion schedule: bad length");
  double prev = 1.0;
  for (int t = 0; t < steps; ++t) {
    if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw std::invalid_argument("diffusion schedule: beta outside (0, 1)");
    if (!(alpha_bars[t] < prev && alpha_bars[t] > 0.0))
      throw std::invalid_argument("diffusion schedule: alpha_bar must decrease strictly in (0, 1]");
    prev = alpha_bars[t];
  }
}

DiffusionSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  DiffusionSchedule s;
  s.steps = steps;
  double ab = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double b = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
    ab *= 1.0 - b;
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    s.alpha_bars.push_back(ab);
  }
  s.validate();
  return s;
}

Tensor timestep_embedding(const std::vector<int>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(t.size() * dim, 0.0);
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      v[r * dim + i] = std::sin(t[r] * f);
      v[r * dim + half + i] = std::cos(t[r] * f);
    }
  return Tensor::from({t.size(), dim}, std::move(v));
}

Denoiser::Denoiser(model::EnergyModel& model, bool time_embedding) : model_(model), time_embedding_(time_embedding) {
  if (model.arch().head != model::Head::noise) throw std::invalid_argument("Denoiser: model needs a noise head");
}

Tensor Denoiser::predict(const Tensor& z, const Tensor& y_t, const std::vector<int>& t) const {
  if (t.size() != y_t.dim(0)) throw ad::ShapeError("Denoiser::predict: one timestep per row");
  const Tensor ctx = time_embedding_ ? ad::add(z, timestep_embedding(t, z.dim(1))) : z;
  return model_.forward(ctx, y_t);
}

Tensor corrupt(const Tensor& y0, const Tensor& eps, const std::vector<int>& t, const DiffusionSchedule& s) {
  if (y0.shape() != eps.shape() || y0.dim(0) != t.size()) throw ad::ShapeError("corrupt: shape mismatch");
  std::vector<double> a(t.size()), b(t.size());
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r] < 0 || t[r] >= s.steps) throw std::out_of_range("corrupt: timestep out of range");
    a[r] = std::sqrt(s.alpha_bars[t[r]]);
    b[r] = std::sqrt(1.0 - s.alpha_bars[t[r]]);
  }
  return ad::add(ad::mul(Tensor::from({t.size(), 1}, a), y0), ad::mul(Tensor::from({t.size(), 1}, b), eps));
}

DdpmLoss ddpm_loss(const NoisePredictor& f, const Tensor& windows, const Tensor& y0, const DiffusionSchedule& s,
                   Rng& rng) {
  DdpmLoss out;
  const std::size_t rows = y0.dim(0);
  out.t.resize(rows);
  for (auto& t : out.t) t = static_cast<int>(rng.uniform_int(0, s.steps - 1));
  out.eps = sampler::gaussian(rows, y0.dim(1), rng);
  const Tensor yt = corrupt(y0, out.eps, out.t, s);
  out.loss = ad::mse(f.predict(f.encode(windows), yt, out.t), out.eps);
  return out;
}

std::vector<int> strided_timesteps(int train_steps, int steps) {
  if (steps < 1 || steps > train_steps)
    throw std::invalid_argument("ddpm: inference steps must be in [1, " + std::to_string(train_steps) + "]");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i)
    ts.push_back(static_cast<int>(std::llround(static_cast<double>(i) * train_steps / steps)) - 1);
  return ts;
}

Tensor ddpm_sample(const NoisePredictor& f, const Tensor& z, const DiffusionSchedule& s, int steps, Rng& rng,
                   bool clip_x0) {
  const auto ts = strided_timesteps(s.steps, steps);
  ad::NoGradGuard off;
  const std::size_t rows = z.dim(0), cols = f.action_size();
  std::vector<double> x = sampler::gaussian(rows, cols, rng).to_vector();
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const double ab_t = s.alpha_bars[t];
    const double ab_s = k + 1 < ts.size() ? s.alpha_bars[ts[k + 1]] : 1.0;
    const Tensor eps = f.predict(z, Tensor::from({rows, cols}, x), std::vector<int>(rows, t));
    const auto e = eps.data();
    // Posterior q(x_s | x_t, x0_hat) over the strided pair (t -> s).
    const double a_ts = ab_t / ab_s;
    const double b_ts = 1.0 - a_ts;
    const double c0 = std::sqrt(ab_s) * b_ts / (1.0 - ab_t);
    const double ct = std::sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t);
    const double sd = std::sqrt((1.0 - ab_s) / (1.0 - ab_t) * b_ts);
    const bool last = k + 1 == ts.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      double x0 = (x[i] - std::sqrt(1.0 - ab_t) * e[i]) / std::sqrt(ab_t);
      if (clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
      x[i] = last ? x0 : c0 * x0 + ct * x[i];
    }
    if (!last)
      for (auto& v : x) v += sd * rng.normal();
    for (double v : x)
      if (!std::isfinite(v)) throw ad::NonFiniteError("ddpm_sample", 0);
  }
  return Tensor::from({rows, cols}, std::move(x));
}

DdpmTrainer::DdpmTrainer(Denoiser& denoiser, train::TrainConfig tcfg, DiffusionConfig dcfg)
    : denoiser_(denoiser),
      tcfg_(tcfg),
      dcfg_(dcfg),
      schedule_(dcfg.schedule()),
      adam_(denoiser.model().parameter_tensors(), tcfg.learning_rate, tcfg.adam) {
  tcfg_.validate();
}

train::EpochReport DdpmTrainer::train_epoch(const train::TrainingSet& data, Rng& rng) {
  auto& m = denoiser_.model();
  data.validate(m.window_size(), m.action_size());
  const auto start = std::chrono::steady_clock::now();
  const auto params = m.parameter_tensors();
  const auto order = train::shuffled_indices(data.size(), rng);
  train::EpochReport rep;
  rep.epoch = ++epoch_;
  std::vector<double> norms;
  double loss_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += tcfg_.batch_size) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                       order.begin() + static_cast<std::ptrdiff_t>(
                                                           std::min(order.size(), b0 + tcfg_.batch_size)));
    ++rep.batches;
    std::vector<Tensor> grads;
    DdpmLoss l;
    try {
      l = ddpm_loss(denoiser_, train::gather_rows(data.windows, idx), train::gather_rows(data.actions, idx),
                    schedule_, rng);
      grads = ad::grad(l.loss, params).values;
    } catch (const ad::NonFiniteError&) {
      ++rep.skipped;
      continue;
    } catch (const model::LayerError&) {
      ++rep.skipped;
      continue;
    }
    const double pre = train::clip_global_norm(grads, tcfg_.grad_clip_norm);
    if (!std::isfinite(pre)) {
      ++rep.skipped;
      continue;
    }
    norms.push_back(pre);
    rep.max_clipped_norm = std::max(rep.max_clipped_norm, train::global_norm(grads));
    adam_.step(grads);
    loss_sum += l.loss.item();
    ++used;
  }
  rep.loss = used ? loss_sum / static_cast<double>(used) : std::nan("");
  rep.grad_norm_p50 = train::percentile(norms, 0.50);
  rep.grad_norm_p99 = train::percentile(norms, 0.99);
  rep.unstable = static_cast<double>(rep.skipped) > tcfg_.unstable_fraction * static_cast<double>(rep.batches);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

double DdpmTrainer::evaluate(const train::TrainingSet& data, Rng& rng) const {
  ad::NoGradGuard off;
  const std::size_t n = data.size();
  double sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t b0 = 0; b0 < n; b0 += tcfg_.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(n, b0 + tcfg_.batch_size); ++i) idx.push_back(i);
    sum += ddpm_loss(denoiser_, train::gather_rows(data.windows, idx), train::gather_rows(data.actions, idx),
                     schedule_, rng)
               .loss.item();
    ++batches;
  }
  return sum / static_cast<double>(batches);
}

DiffusionPolicy::DiffusionPolicy(const Denoiser& denoiser, envs::NormStats norm, DiffusionConfig cfg, int steps)
    : denoiser_(denoiser), norm_(std::move(norm)), cfg_(cfg), schedule_(cfg.schedule()), steps_(steps) {
  norm_.validate();
  strided_timesteps(schedule_.steps, steps_);  // validates the step count
}

envs::PolicyOutput DiffusionPolicy::act(const model::ObservationWindow& window, const envs::EnvState&, Rng& rng) {
  Tensor z;
  {
    ad::NoGradGuard off;
    z = denoiser_.encode(model::stack_windows({window}));
  }
  const Tensor y = ddpm_sample(denoiser_, z, schedule_, steps_, rng, cfg_.clip_x0);
  model::ActionTrajectory t;
  t.action_dim = envs::kActionDim;
  t.horizon = y.numel() / envs::kActionDim;
  t.actions = y.to_vector();
  t.normalized = true;
  return {norm_.denormalize(t), 0.0, steps_};
}

}  // namespace ebt::diffusion
