// ebt/trainer.hpp
//
// Training through the refinement chain. Each batch: encode contexts, draw a
// chain length N and one step size eta, run N training-mode refinement steps
// from y0 ~ N(0, I), and regress every intermediate candidate onto the
// demonstrated (normalized) action chunk. The loss is the mean of the per-step
// MSE terms. Parameter gradients are clipped by global norm, then Adam.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ebt/energy_model.hpp"
#include "ebt/rng.hpp"
#include "ebt/sampler.hpp"
#include "ebt/tensor.hpp"

namespace ebt::train {

using ad::Tensor;

enum class ChainGradMode { truncated, full };

std::string to_string(ChainGradMode m);
ChainGradMode chain_grad_mode_from_string(const std::string& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  AdamConfig adam;
  double grad_clip_norm = 1.0;
  ChainGradMode chain_grad_mode = ChainGradMode::truncated;
  // Flag an epoch when more than this fraction of its batches were skipped.
  double unstable_fraction = 0.10;
  // Write a checkpoint every k epochs (0 = never).
  int checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Supervised pairs: row i of `windows` is the context for row i of `actions`.
// Actions are in normalized [-1, 1] coordinates.
struct TrainingSet {
  Tensor windows;  // [M, window_size]
  Tensor actions;  // [M, action_size]

  std::size_t size() const { return windows.rank() == 2 ? windows.dim(0) : 0; }
  void validate(std::size_t window_size, std::size_t action_size) const;
};

// Rows `idx` of a [M, D] tensor, as a fresh constant.
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx);

struct ChainLoss {
  Tensor loss;                                // scalar, differentiable w.r.t. parameters
  std::vector<sampler::ChainTrace> traces;    // one per row
  double final_energy = 0.0;                  // batch mean at the last step
};

// Mean over steps of MSE(y_{i+1}, target). Truncated mode treats each y_i as
// a constant, so parameter gradients flow only through that step's dE/dy;
// full mode differentiates through the whole chain.
ChainLoss chain_loss(const model::EnergyFunction& f, const Tensor& z, const Tensor& target,
                     const Tensor& y0, int steps, double eta, const sampler::SamplerConfig& cfg,
                     Rng& rng, ChainGradMode mode);

// n_base + UniformInt{0..n_rand}.
int sample_chain_length(const sampler::SamplerConfig& cfg, Rng& rng);

// Scales `grads` in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);
double global_norm(const std::vector<Tensor>& grads);

// Adam over a fixed list of leaf parameters, updated in place.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, AdamConfig cfg = {});
  void step(const std::vector<Tensor>& grads);
  std::uint64_t steps() const { return t_; }
  double learning_rate() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// Per-epoch summary. `seconds` is wall-clock and therefore excluded from the
// deterministic CSV (see write_timing_csv).
struct EpochReport {
  int epoch = 0;
  double loss = 0.0;
  double energy = 0.0;
  double grad_norm_p50 = 0.0;   // pre-clip
  double grad_norm_p99 = 0.0;   // pre-clip
  double max_clipped_norm = 0.0;
  std::size_t batches = 0;
  std::size_t skipped = 0;
  std::size_t nonfinite_updates = 0;
  bool unstable = false;
  double seconds = 0.0;
  std::string checkpoint;
};

struct TrainReport {
  std::vector<EpochReport> epochs;

  // epoch,loss,energy,grad_norm_p50,grad_norm_p99,max_clipped_norm,batches,skipped,unstable,checkpoint
  void write_csv(std::ostream& os) const;
  // epoch,seconds
  void write_timing_csv(std::ostream& os) const;
};

// Value at fraction q of the sorted sample (nearest rank).
double percentile(std::vector<double> v, double q);

// Drives epochs for one energy model. Owns the optimizer state.
class Trainer {
 public:
  Trainer(model::EnergyModel& model, TrainConfig tcfg, sampler::SamplerConfig scfg);

  // One pass over `data` in a freshly shuffled order.
  EpochReport train_epoch(const TrainingSet& data, Rng& rng);

  const TrainConfig& config() const { return tcfg_; }
  int epochs_done() const { return epoch_; }

 private:
  model::EnergyModel& model_;
  TrainConfig tcfg_;
  sampler::SamplerConfig scfg_;
  Adam adam_;
  int epoch_ = 0;
};

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace ebt::train
