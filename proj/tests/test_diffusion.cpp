// tests/test_diffusion.cpp

#include <cmath>

#include "doctest.h"
#include "ebt/diffusion.hpp"

using namespace ebt;
using ad::Tensor;
using diffusion::DiffusionConfig;

namespace {

model::Architecture tiny_noise_arch() {
  model::Architecture a;
  a.head = model::Head::noise;
  a.obs_dim = 3;
  a.history = 1;
  a.horizon = 2;
  a.action_dim = 2;
  a.embed_dim = 4;
  a.encoder_hidden = 6;
  a.mlp_width = 8;
  a.mlp_depth = 1;
  return a;
}

Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Knows the clean sample, so it recovers the injected noise exactly.
class Oracle final : public diffusion::NoisePredictor {
 public:
  Oracle(Tensor y0, diffusion::DiffusionSchedule s) : y0_(std::move(y0)), s_(std::move(s)) {}
  Tensor encode(const Tensor& w) const override { return Tensor::zeros({w.dim(0), 1}); }
  Tensor predict(const Tensor&, const Tensor& yt, const std::vector<int>& t) const override {
    std::vector<double> e(yt.numel());
    const std::size_t cols = yt.dim(1);
    for (std::size_t r = 0; r < t.size(); ++r) {
      const double ab = s_.alpha_bars[t[r]];
      for (std::size_t c = 0; c < cols; ++c)
        e[r * cols + c] = (yt[r * cols + c] - std::sqrt(ab) * y0_[r * cols + c]) / std::sqrt(1.0 - ab);
    }
    return Tensor::from(yt.shape(), e);
  }
  std::size_t action_size() const override { return y0_.dim(1); }

 private:
  Tensor y0_;
  diffusion::DiffusionSchedule s_;
};

}  // namespace

TEST_CASE("schedule") {
  const auto s = DiffusionConfig{}.schedule();
  CHECK(s.steps == 100);
  CHECK(s.betas.front() == 1e-3);
  CHECK(s.betas.back() == doctest::Approx(0.2).epsilon(1e-15));
  for (int t = 1; t < s.steps; ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  CHECK(s.alpha_bars.back() < 1e-4);
  CHECK_THROWS_AS(diffusion::linear_schedule(10, 0.5, 1.0), std::invalid_argument);

  // Strided subsequences start at the last training step.
  CHECK(diffusion::strided_timesteps(100, 10) == std::vector<int>{99, 89, 79, 69, 59, 49, 39, 29, 19, 9});
  CHECK(diffusion::strided_timesteps(100, 100).size() == 100);
  CHECK(diffusion::strided_timesteps(100, 100).back() == 0);
  CHECK_THROWS_AS(diffusion::strided_timesteps(100, 0), std::invalid_argument);
  CHECK_THROWS_AS(diffusion::strided_timesteps(100, 101), std::invalid_argument);
}

TEST_CASE("terminal corruption is standard normal") {
  const auto s = DiffusionConfig{}.schedule();
  Rng rng(1);
  const std::size_t n = 10000, d = 4;
  // Clean actions pinned at the edge of the normalized range.
  const Tensor y0 = Tensor::full({n, d}, 1.0);
  const Tensor eps = sampler::gaussian(n, d, rng);
  const Tensor yt = diffusion::corrupt(y0, eps, std::vector<int>(n, s.steps - 1), s);
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0.0, q = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += yt[r * d + c];
    m /= n;
    for (std::size_t r = 0; r < n; ++r) q += (yt[r * d + c] - m) * (yt[r * d + c] - m);
    const double sd = std::sqrt(q / n);
    CHECK(std::abs(m) < 0.05);
    CHECK(std::abs(sd - 1.0) < 0.05);
  }
}

TEST_CASE("oracle noise gives zero loss and exact samples") {
  const auto s = DiffusionConfig{}.schedule();
  Rng rng(3);
  const Tensor y0 = random_tensor({5, 4}, rng, -0.9, 0.9);
  Oracle oracle(y0, s);
  const auto l = diffusion::ddpm_loss(oracle, Tensor::zeros({5, 1}), y0, s, rng);
  CHECK(l.loss.item() < 1e-20);
  // With a perfect noise estimate the first x0 prediction is already exact.
  for (int steps : {1, 10, 100}) {
    const Tensor out = diffusion::ddpm_sample(oracle, Tensor::zeros({5, 1}), s, steps, rng);
    for (std::size_t i = 0; i < y0.numel(); ++i) CHECK(out[i] == doctest::Approx(y0[i]).epsilon(1e-9));
  }
}

TEST_CASE("loss gradient matches finite differences") {
  const auto a = tiny_noise_arch();
  Rng rng(4);
  model::EnergyModel m(a, rng);
  diffusion::Denoiser den(m);
  const auto s = DiffusionConfig{}.schedule();
  const Tensor w = random_tensor({3, a.window_size()}, rng);
  const Tensor y0 = random_tensor({3, a.action_size()}, rng);
  auto loss = [&] {
    Rng r(9);
    return diffusion::ddpm_loss(den, w, y0, s, r).loss;
  };
  for (const char* name : {"head.w", "mlp.l0.w", "enc.l1.w"}) {
    CAPTURE(name);
    Tensor p = m.param(name);
    const Tensor g = ad::grad(loss(), {p})[0];
    double worst = 0.0;
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + 1e-6;
      const double fp = loss().item();
      data[i] = keep - 1e-6;
      const double fm = loss().item();
      data[i] = keep;
      const double c = (fp - fm) / 2e-6;
      worst = std::max(worst, std::abs(g[i] - c) / (std::abs(g[i]) + std::abs(c) + 1e-12));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("sampling is deterministic per seed") {
  const auto a = tiny_noise_arch();
  Rng init(2);
  model::EnergyModel m(a, init);
  diffusion::Denoiser den(m);
  const auto s = DiffusionConfig{}.schedule();
  const Tensor z = Tensor::zeros({2, a.embed_dim});
  Rng r1(5), r2(5);
  CHECK(diffusion::ddpm_sample(den, z, s, 10, r1).to_vector() == diffusion::ddpm_sample(den, z, s, 10, r2).to_vector());
}

TEST_CASE("timestep embedding helps") {
  // Data whose clean actions are a fixed function of the window: the
  // denoiser can only use the right noise scale if it knows t.
  model::Architecture a = tiny_noise_arch();
  a.embed_dim = 16;
  a.mlp_width = 32;
  Rng data_rng(1);
  auto make_set = [&](std::size_t rows) {
    const Tensor w = random_tensor({rows, a.window_size()}, data_rng);
    std::vector<double> act(rows * a.action_size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < a.action_size(); ++c) act[r * a.action_size() + c] = std::tanh(2 * w[r * 3 + c % 3]);
    return train::TrainingSet{w, Tensor::from({rows, a.action_size()}, act)};
  };
  const auto set = make_set(256);
  const auto validation = make_set(256);

  auto final_loss = [&](bool with_t) {
    Rng init(7);
    model::EnergyModel m(a, init);
    diffusion::Denoiser den(m, with_t);
    train::TrainConfig tc;
    tc.learning_rate = 3e-3;
    tc.batch_size = 32;
    DiffusionConfig dc;
    dc.time_embedding = with_t;
    diffusion::DdpmTrainer trainer(den, tc, dc);
    Rng rng(8);
    for (int e = 0; e < 30; ++e) trainer.train_epoch(set, rng);
    Rng eval(99);
    double sum = 0.0;
    for (int k = 0; k < 8; ++k) sum += trainer.evaluate(validation, eval);
    return sum / 8;
  };
  const double with_t = final_loss(true), without_t = final_loss(false);
  CAPTURE(with_t);
  CAPTURE(without_t);
  CHECK(with_t < without_t);
}

TEST_CASE("noise head is required") {
  model::Architecture a = tiny_noise_arch();
  a.head = model::Head::energy;
  Rng rng(0);
  model::EnergyModel m(a, rng);
  CHECK_THROWS_AS(diffusion::Denoiser{m}, std::invalid_argument);
}
