// src/trainer.cpp

#include "ebt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace ebt::train {

std::string to_string(ChainGradMode m) { return m == ChainGradMode::full ? "full" : "truncated"; }

ChainGradMode chain_grad_mode_from_string(const std::string& s) {
  if (s == "truncated") return ChainGradMode::truncated;
  if (s == "full") return ChainGradMode::full;
  throw std::invalid_argument("unknown chain_grad_mode '" + s + "' (truncated|full)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  // lr = 0 is accepted as a null update (useful for checks); negative is not.
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) fail("beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(adam.eps > 0.0)) fail("adam eps must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

void TrainingSet::validate(std::size_t window_size, std::size_t action_size) const {
  if (windows.rank() != 2 || windows.dim(1) != window_size)
    throw ad::ShapeError("training set: windows must be [M," + std::to_string(window_size) + "], got " +
                         ad::shape_str(windows.shape()));
  if (actions.rank() != 2 || actions.dim(1) != action_size)
    throw ad::ShapeError("training set: actions must be [M," + std::to_string(action_size) + "], got " +
                         ad::shape_str(actions.shape()));
  if (windows.dim(0) != actions.dim(0)) throw ad::ShapeError("training set: row counts differ");
  if (windows.dim(0) == 0) throw std::invalid_argument("training set is empty");
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t cols = t.dim(1);
  const auto src = t.data();
  std::vector<double> out(idx.size() * cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  return Tensor::from({idx.size(), cols}, std::move(out));
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

ChainLoss chain_loss(const model::EnergyFunction& f, const Tensor& z, const Tensor& target,
                     const Tensor& y0, int steps, double eta, const sampler::SamplerConfig& cfg,
                     Rng& rng, ChainGradMode mode) {
  if (steps < 1) throw std::invalid_argument("chain_loss: need at least one step");
  if (target.shape() != y0.shape())
    throw ad::ShapeError("chain_loss: target " + ad::shape_str(target.shape()) + " vs y0 " +
                         ad::shape_str(y0.shape()));
  ad::EnableGradGuard on(true);
  ChainLoss out;
  out.traces.resize(y0.dim(0));
  Tensor y = y0.detach();
  Tensor v = Tensor::zeros(y0.shape());
  Tensor total;
  for (int i = 0; i < steps; ++i) {
    auto s = sampler::refine_step(f, z, y, v, i, steps, eta, cfg, rng, sampler::Mode::training,
                                  /*create_graph=*/true);
    Tensor term = ad::mse(s.y, target);
    total = i == 0 ? term : ad::add(total, term);
    for (std::size_t r = 0; r < s.entries.size(); ++r) out.traces[r].steps.push_back(std::move(s.entries[r]));
    if (mode == ChainGradMode::truncated) {
      y = s.y.detach();
      v = s.velocity.detach();
    } else {
      y = s.y;
      v = s.velocity;
    }
  }
  out.loss = ad::scale(total, 1.0 / steps);
  double e = 0.0;
  for (const auto& t : out.traces) e += t.steps.back().energy;
  out.final_energy = e / static_cast<double>(out.traces.size());
  return out;
}

int sample_chain_length(const sampler::SamplerConfig& cfg, Rng& rng) {
  return cfg.base_steps + static_cast<int>(rng.uniform_int(0, cfg.extra_steps));
}

double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) sq += x * x;
  return std::sqrt(sq);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& g : grads) g = ad::scale(g.detach(), k);
  }
  return norm;
}

Adam::Adam(std::vector<Tensor> params, double lr, AdamConfig cfg)
    : params_(std::move(params)), lr_(lr), cfg_(cfg) {
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw std::invalid_argument("Adam: parameters must be leaves");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (grads[k].shape() != params_[k].shape())
      throw ad::ShapeError("Adam::step: gradient shape mismatch for parameter " + std::to_string(k));
    auto p = params_[k].mutable_data();
    const auto g = grads[k].data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(q * static_cast<double>(v.size()));
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(v.size()))) - 1;
  return v[idx];
}

void TrainReport::write_csv(std::ostream& os) const {
  os << "epoch,loss,energy,grad_norm_p50,grad_norm_p99,max_clipped_norm,batches,skipped,unstable,checkpoint\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%d,", e.epoch, e.loss,
                  e.energy, e.grad_norm_p50, e.grad_norm_p99, e.max_clipped_norm, e.batches, e.skipped,
                  e.unstable ? 1 : 0);
    os << buf << e.checkpoint << '\n';
  }
}

void TrainReport::write_timing_csv(std::ostream& os) const {
  os << "epoch,seconds\n";
  char buf[64];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.3f\n", e.epoch, e.seconds);
    os << buf;
  }
}

Trainer::Trainer(model::EnergyModel& model, TrainConfig tcfg, sampler::SamplerConfig scfg)
    : model_(model),
      tcfg_(tcfg),
      scfg_(scfg),
      adam_(model.parameter_tensors(), tcfg.learning_rate, tcfg.adam) {
  tcfg_.validate();
  scfg_.validate();
  if (model.arch().head != model::Head::energy)
    throw std::invalid_argument("Trainer: model must have an energy head");
}

EpochReport Trainer::train_epoch(const TrainingSet& data, Rng& rng) {
  data.validate(model_.window_size(), model_.action_size());
  const auto start = std::chrono::steady_clock::now();
  const auto params = model_.parameter_tensors();
  const auto order = shuffled_indices(data.size(), rng);

  EpochReport rep;
  rep.epoch = ++epoch_;
  std::vector<double> norms;
  double loss_sum = 0.0, energy_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += tcfg_.batch_size) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                       order.begin() + static_cast<std::ptrdiff_t>(
                                                           std::min(order.size(), b0 + tcfg_.batch_size)));
    ++rep.batches;
    const Tensor windows = gather_rows(data.windows, idx);
    const Tensor target = gather_rows(data.actions, idx);
    const int steps = sample_chain_length(scfg_, rng);
    const double eta = sampler::sample_step_size(scfg_, rng);
    const Tensor y0 = sampler::gaussian(idx.size(), model_.action_size(), rng);

    std::vector<Tensor> grads;
    ChainLoss cl;
    try {
      const Tensor z = model_.encode(windows);
      cl = chain_loss(model_, z, target, y0, steps, eta, scfg_, rng, tcfg_.chain_grad_mode);
      grads = ad::grad(cl.loss, params).values;
    } catch (const ad::NonFiniteError&) {
      ++rep.skipped;
      continue;
    } catch (const model::LayerError&) {
      ++rep.skipped;
      continue;
    } catch (const sampler::ChainAborted&) {
      ++rep.skipped;
      continue;
    }
    const double pre = clip_global_norm(grads, tcfg_.grad_clip_norm);
    if (!std::isfinite(pre) || !std::isfinite(cl.loss.item())) {
      ++rep.skipped;
      continue;
    }
    norms.push_back(pre);
    rep.max_clipped_norm = std::max(rep.max_clipped_norm, global_norm(grads));
    adam_.step(grads);
    for (const auto& p : params)
      for (double x : p.data())
        if (!std::isfinite(x)) {
          ++rep.nonfinite_updates;
          break;
        }
    loss_sum += cl.loss.item();
    energy_sum += cl.final_energy;
    ++used;
  }
  if (used > 0) {
    rep.loss = loss_sum / static_cast<double>(used);
    rep.energy = energy_sum / static_cast<double>(used);
  } else {
    rep.loss = rep.energy = std::nan("");
  }
  rep.grad_norm_p50 = percentile(norms, 0.50);
  rep.grad_norm_p99 = percentile(norms, 0.99);
  rep.unstable = static_cast<double>(rep.skipped) > tcfg_.unstable_fraction * static_cast<double>(rep.batches);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace ebt::train
