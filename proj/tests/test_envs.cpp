// tests/test_envs.cpp

#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "ebt/envs.hpp"

using namespace ebt;
using namespace ebt::envs;

namespace {

// Follows the expert from a given reset; noise applies to executed actions.
EpisodeRecord expert_episode(const Env& env, Mode mode, double noise, std::uint64_t seed) {
  ExpertPolicy p(env, mode, noise);
  return rollout(p, env, env.params().max_steps, std::nullopt, seed);
}

// Returns the chunk a policy would emit, and records every window it saw.
class WindowSpy final : public Policy {
 public:
  explicit WindowSpy(const Env& env) : inner_(env, Mode::left) {}
  PolicyOutput act(const ObservationWindow& w, const EnvState& s, Rng& rng) override {
    seen.push_back({w, s.time});
    return inner_.act(w, s, rng);
  }
  std::vector<std::pair<ObservationWindow, int>> seen;

 private:
  ExpertPolicy inner_;
};

}  // namespace

TEST_CASE("fork expert") {
  const Env env(EnvId::fork);
  Rng rng(0);
  EnvState origin;

  SUBCASE("points at the mode's goal") {
    const auto c = fork_expert(env, origin, Mode::left, rng, 0.0);
    const double n = std::hypot(0.7, 0.8);
    CHECK(c.at(0, 0) == doctest::Approx(-0.1 * 0.7 / n).epsilon(1e-15));
    CHECK(c.at(0, 1) == doctest::Approx(0.1 * 0.8 / n).epsilon(1e-15));
    // Straight line: every step has the same direction and length.
    for (std::size_t i = 1; i < c.horizon; ++i) {
      CHECK(c.at(i, 0) == doctest::Approx(c.at(0, 0)).epsilon(1e-12));
      CHECK(c.at(i, 1) == doctest::Approx(c.at(0, 1)).epsilon(1e-12));
    }
  }

  SUBCASE("mirror symmetry") {
    for (int k = 0; k < 50; ++k) {
      EnvState s;
      s.pos = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
      EnvState m = s;
      m.pos[0] = -s.pos[0];
      const auto a = fork_expert(env, s, Mode::left, rng, 0.0);
      const auto b = fork_expert(env, m, Mode::right, rng, 0.0);
      for (std::size_t i = 0; i < a.horizon; ++i) {
        CHECK(a.at(i, 0) == -b.at(i, 0));
        CHECK(a.at(i, 1) == b.at(i, 1));
      }
    }
  }

  SUBCASE("1000 noisy expert rollouts reach their goal") {
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const Mode mode = seed % 2 ? Mode::left : Mode::right;
      const auto rec = expert_episode(env, mode, 0.02, seed);
      if (rec.success && rec.goal == (mode == Mode::left ? 0 : 1)) ++ok;
    }
    CHECK(ok == 1000);
  }
}

TEST_CASE("hang expert") {
  SUBCASE("noise off always succeeds") {
    const Env env(EnvId::hang);
    for (std::uint64_t seed = 0; seed < 100; ++seed) CHECK(expert_episode(env, Mode::none, 0.0, seed).success);
  }
  SUBCASE("halved corridor does not matter to the exact expert") {
    EnvParams p;
    p.corridor_half_width = 0.025;
    const Env env(EnvId::hang, p);
    for (std::uint64_t seed = 0; seed < 100; ++seed) CHECK(expert_episode(env, Mode::none, 0.0, seed).success);
  }
  SUBCASE("noise 0.05 makes the task fallible") {
    const Env env(EnvId::hang);
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) ok += expert_episode(env, Mode::none, 0.05, seed).success;
    CAPTURE(ok);
    CHECK(ok < 200);
    CHECK(ok > 0);
  }
  SUBCASE("wall outside the gap crashes") {
    const Env env(EnvId::hang);
    EnvState s;
    s.pos = {-0.05, 0.3};
    env.step(s, {0.1, 0.0});
    CHECK(s.crashed);
    CHECK(env.outcome(s) == Outcome::crashed);
    EnvState g;
    g.pos = {-0.05, 0.01};
    env.step(g, {0.1, 0.0});
    CHECK_FALSE(g.crashed);
    CHECK(g.passed_gate);
  }
}

TEST_CASE("generate_dataset") {
  const auto a = generate_dataset(EnvId::fork, 200, 7);
  CHECK(a.demos.size() == 200);
  int left = 0;
  for (const auto& d : a.demos) left += d.mode == Mode::left;
  // Seeded count; a fair coin over 200 draws stays well inside 100 +- 30.
  CAPTURE(left);
  CHECK(std::abs(left - 100) <= 30);

  SUBCASE("same seed, same bytes") {
    CHECK(encode_dataset(generate_dataset(EnvId::fork, 200, 7)) == encode_dataset(a));
    CHECK(encode_dataset(generate_dataset(EnvId::fork, 200, 8)) != encode_dataset(a));
  }

  SUBCASE("normalization round trip") {
    double worst = 0.0;
    for (const auto& d : a.demos)
      for (std::size_t t = 0; t < d.length(); ++t) {
        const auto c = chunk_at(d, t, 8);
        const auto n = a.norm.normalize(c);
        for (double u : n.actions) {
          CHECK(u >= -1.0 - 1e-12);
          CHECK(u <= 1.0 + 1e-12);
        }
        const auto back = a.norm.denormalize(n);
        for (std::size_t i = 0; i < c.actions.size(); ++i)
          worst = std::max(worst, std::abs(back.actions[i] - c.actions[i]));
      }
    CHECK(worst < 1e-12);
  }

  SUBCASE("file round trip") {
    const auto path = std::filesystem::temp_directory_path() / "ebt_test_dataset.bin";
    save_dataset(path, a);
    const auto b = load_dataset(path);
    CHECK(encode_dataset(b) == encode_dataset(a));
    CHECK(b.norm == a.norm);
    std::filesystem::remove(path);
    auto bytes = encode_dataset(a);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_dataset(bytes), DatasetError);
  }

  SUBCASE("bimodal endpoints") {
    // Cluster by mode; compare inter-cluster distance to spread.
    double mean[2][2] = {{0, 0}, {0, 0}};
    int n[2] = {0, 0};
    for (const auto& d : a.demos) {
      const int k = d.mode == Mode::left ? 0 : 1;
      mean[k][0] += d.observations.back()[0];
      mean[k][1] += d.observations.back()[1];
      ++n[k];
    }
    for (int k = 0; k < 2; ++k)
      for (int j = 0; j < 2; ++j) mean[k][j] /= n[k];
    double var = 0.0;
    for (const auto& d : a.demos) {
      const int k = d.mode == Mode::left ? 0 : 1;
      var += std::pow(d.observations.back()[0] - mean[k][0], 2) + std::pow(d.observations.back()[1] - mean[k][1], 2);
    }
    const double sd = std::sqrt(var / a.demos.size());
    const double gap = std::hypot(mean[0][0] - mean[1][0], mean[0][1] - mean[1][1]);
    CHECK(gap > 5 * sd);
  }

  SUBCASE("training pairs line up with the demonstrations") {
    const auto p = training_pairs(a);
    CHECK(p.rows == a.sample_count());
    CHECK(p.windows.size() == p.rows * 12);
    CHECK(p.actions.size() == p.rows * 16);
  }
}

TEST_CASE("windows never contain the future") {
  const auto ds = generate_dataset(EnvId::hang, 5, 3);
  for (const auto& d : ds.demos)
    for (std::size_t t = 0; t < d.length(); ++t) {
      const auto w = window_at(d, t, 2);
      // The last slot is exactly the current observation; the first is t-1 (or t).
      const std::size_t od = d.observations[0].size();
      for (std::size_t j = 0; j < od; ++j) {
        CHECK(w.states[od + j] == d.observations[t][j]);
        CHECK(w.states[j] == d.observations[t > 0 ? t - 1 : 0][j]);
      }
    }

  // Same property through the rollout: every window's newest frame is the
  // state at the time the policy was queried.
  const Env env(EnvId::fork);
  WindowSpy spy(env);
  const auto rec = rollout(spy, env, 64, std::nullopt, 5);
  for (const auto& [w, t] : spy.seen) {
    CHECK(w.states[6] == rec.positions[t][0]);
    CHECK(w.states[7] == rec.positions[t][1]);
  }
}

TEST_CASE("rollout") {
  const Env fork(EnvId::fork);

  SUBCASE("expert policy succeeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(expert_episode(fork, Mode::right, 0.0, seed).success);
  }

  SUBCASE("zero displacement changes nothing") {
    ExpertPolicy p(fork, Mode::left, 0.02);
    const auto plain = rollout(p, fork, 64, std::nullopt, 11);
    const auto zero = rollout(p, fork, 64, Perturbation{3, {0.0, 0.0}}, 11);
    CHECK(plain.positions == zero.positions);
    CHECK(plain.success == zero.success);
    REQUIRE(zero.perturbed_at);
    CHECK(*zero.perturbed_at == 3);
  }

  SUBCASE("replay reproduces positions exactly") {
    const Env hang(EnvId::hang);
    ExpertPolicy p(hang, Mode::none, 0.03);
    Rng rng(2);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto rec = rollout(p, hang, 64, random_perturbation(8, 0.2, rng), seed);
      CHECK(replay(hang, rec) == rec.positions);
    }
  }

  SUBCASE("hang perturbation keeps the agent on its side") {
    const Env hang(EnvId::hang);
    EnvState s;
    s.pos = {-0.05, 0.0};
    hang.displace(s, {0.3, 0.0});
    CHECK(s.pos[0] < 0.0);
  }

  SUBCASE("policy failure is recorded") {
    class Broken final : public Policy {
     public:
      PolicyOutput act(const ObservationWindow&, const EnvState&, Rng&) override {
        throw std::runtime_error("boom");
      }
    } broken;
    const auto rec = rollout(broken, fork, 64, std::nullopt, 1);
    CHECK_FALSE(rec.success);
    CHECK(rec.cause.find("boom") != std::string::npos);
  }

  SUBCASE("csv") {
    const auto rec = expert_episode(fork, Mode::left, 0.0, 0);
    std::ostringstream os;
    rec.write_csv(os);
    const auto s = os.str();
    CHECK(s.rfind("time,x,y,replan,energy,steps_used\n0,", 0) == 0);
  }
}
