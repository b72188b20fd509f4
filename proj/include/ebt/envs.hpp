// ebt/envs.hpp
//
// Two point-mass tasks on the [-1, 1]^2 desk:
//
//   fork  start near the origin; two goals at (-0.7, 0.8) and (0.7, 0.8).
//         Demonstrations pick one at random, so the data is bimodal.
//   hang  start in the lower-left; pass a wall at x = 0 through a narrow gap
//         (|y| <= 0.05), then reach the hang point (0.6, 0.6). Touching the
//         wall outside the gap ends the episode.
//
// Dynamics: p <- clip(p + a). Policies predict 8-step chunks and the rollout
// executes the first 4 before re-planning.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebt/energy_model.hpp"
#include "ebt/rng.hpp"

namespace ebt::envs {

using Vec2 = std::array<double, 2>;
using model::ActionTrajectory;
using model::ObservationWindow;

enum class EnvId : std::uint32_t { fork = 0, hang = 1 };
std::string to_string(EnvId id);
EnvId env_from_string(const std::string& s);

struct EnvParams {
  double workspace = 1.0;       // positions live in [-workspace, workspace]^2
  double speed = 0.1;           // expert step length
  double action_noise = 0.02;   // expert action noise std
  double success_radius = 0.1;
  double corridor_half_width = 0.05;  // hang gap
  double start_radius = 0.3;    // fork start disk
  int max_steps = 64;
  std::size_t history = 2;
  std::size_t horizon = 8;
  std::size_t execute = 4;      // receding-horizon stride

  void validate() const;
};

inline constexpr Vec2 kForkLeft{-0.7, 0.8};
inline constexpr Vec2 kForkRight{0.7, 0.8};
inline constexpr Vec2 kHangGate{-0.2, 0.0};
inline constexpr Vec2 kHangPoint{0.6, 0.6};
inline constexpr std::size_t kActionDim = 2;

enum class Mode : std::uint32_t { left = 0, right = 1, none = 2 };

struct EnvState {
  Vec2 pos{0.0, 0.0};
  int time = 0;
  bool passed_gate = false;  // hang: crossed x = 0 through the gap
  bool crashed = false;      // hang: hit the wall
};

enum class Outcome { running, success, crashed };

class Env {
 public:
  Env(EnvId id, EnvParams params = {});

  EnvId id() const { return id_; }
  const EnvParams& params() const { return params_; }
  std::size_t obs_dim() const { return id_ == EnvId::fork ? 6 : 4; }
  std::vector<Vec2> goals() const;

  EnvState reset(Rng& rng) const;
  // fork: (p, left - p, right - p); hang: (p, hang_point - p).
  std::vector<double> observe(const EnvState& s) const;
  // Applies one action (environment units). No noise: deterministic.
  void step(EnvState& s, const Vec2& action) const;
  Outcome outcome(const EnvState& s) const;
  // Which goal the agent is within success radius of, if any (fork).
  std::optional<std::size_t> goal_reached(const EnvState& s) const;
  // Teleport by `d`, clipped to the workspace; hang keeps the agent on its
  // side of the wall.
  void displace(EnvState& s, const Vec2& d) const;
  // Model architecture fields that depend on the task.
  model::Architecture architecture(model::Architecture base) const;

 private:
  Vec2 clip(Vec2 p) const;
  EnvId id_;
  EnvParams params_;
};

// One expert action (noise std `noise`). Fork heads straight for the mode's
// goal; hang approaches the gate point, threads the gap, then heads for the
// hang point.
Vec2 fork_expert_action(const Env& env, const EnvState& s, Mode mode, Rng& rng, double noise);
Vec2 hang_expert_action(const Env& env, const EnvState& s, Rng& rng, double noise);

// n-step chunks from rolling the expert forward on a copy of the state.
ActionTrajectory fork_expert(const Env& env, const EnvState& s, Mode mode, Rng& rng, double noise);
ActionTrajectory hang_expert(const Env& env, const EnvState& s, Rng& rng, double noise);

struct Demonstration {
  Mode mode = Mode::none;
  std::vector<std::vector<double>> observations;  // T + 1, the last after the final action
  std::vector<Vec2> actions;                      // T executed actions
  std::size_t length() const { return actions.size(); }
};

// Window ending at time t: observations t-h+1..t, the first repeated before
// the episode starts. Never looks past t.
ObservationWindow window_at(const Demonstration& d, std::size_t t, std::size_t history);
// Actions t..t+n-1; past the end of the episode the last action repeats.
ActionTrajectory chunk_at(const Demonstration& d, std::size_t t, std::size_t horizon);

struct NormStats {
  std::vector<double> min, max;  // per action dimension

  void validate() const;
  double normalize(double a, std::size_t dim) const;
  double denormalize(double u, std::size_t dim) const;
  ActionTrajectory normalize(const ActionTrajectory& t) const;
  ActionTrajectory denormalize(const ActionTrajectory& t) const;
  bool operator==(const NormStats&) const = default;
};

struct Dataset {
  EnvId env = EnvId::fork;
  EnvParams params;
  std::uint64_t seed = 0;
  std::vector<Demonstration> demos;
  NormStats norm;
  std::size_t attempts = 0;  // expert episodes run, including discarded failures

  std::size_t sample_count() const;
};

// `episodes` successful expert demonstrations. Deterministic per seed.
Dataset generate_dataset(EnvId env, std::size_t episodes, std::uint64_t seed, EnvParams params = {});

// Flattened (window, normalized chunk) pairs: [M, h*d_o] and [M, n*d_a].
struct Pairs {
  std::vector<double> windows, actions;
  std::size_t rows = 0;
};
Pairs training_pairs(const Dataset& d);

// ---------------------------------------------------------------------------
// Dataset file (little-endian):
//
//   magic     8 bytes "EBTDATA1"
//   version   u32 1
//   env       u32 (0 fork, 1 hang)
//   params    f64 workspace, speed, action_noise, success_radius,
//                 corridor_half_width, start_radius
//             u32 max_steps, history, horizon, execute
//   seed      u64
//   attempts  u64
//   obs_dim   u32
//   count     u32 demonstrations, each:
//               u32 mode, u32 T, (T+1) x obs_dim f64 observations,
//               T x 2 f64 actions
//   norm      2 x f64 min, 2 x f64 max

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Rollouts

struct PolicyOutput {
  ActionTrajectory actions;  // environment units
  double energy = 0.0;       // final energy, when the policy has one
  int steps_used = 0;        // refinement / denoising steps
};

class Policy {
 public:
  virtual ~Policy() = default;
  // `state` is the true environment state; learned policies must only read
  // `window`. Scripted experts use the state.
  virtual PolicyOutput act(const ObservationWindow& window, const EnvState& state, Rng& rng) = 0;
};

class ExpertPolicy final : public Policy {
 public:
  ExpertPolicy(const Env& env, Mode mode, double noise = 0.0) : env_(env), mode_(mode), noise_(noise) {}
  PolicyOutput act(const ObservationWindow& window, const EnvState& state, Rng& rng) override;

 private:
  const Env& env_;
  Mode mode_;
  double noise_;
};

struct Perturbation {
  int step = 0;         // applied before the action at this time index
  Vec2 displacement{0.0, 0.0};
};

// level x a uniformly random unit direction.
Perturbation random_perturbation(int step, double level, Rng& rng);

struct Replan {
  int time = 0;
  double energy = 0.0;
  int steps_used = 0;
};

struct EpisodeRecord {
  EnvId env = EnvId::fork;
  std::uint64_t seed = 0;
  bool success = false;
  std::string cause;                 // failure cause, empty on success
  int goal = -1;                     // fork: index of the goal reached
  std::optional<Perturbation> perturbation;
  std::optional<int> perturbed_at;   // set when the perturbation was applied
  EnvState initial;
  std::vector<Vec2> positions;       // after reset and after every action
  std::vector<Vec2> actions;
  std::vector<Replan> replans;

  Vec2 final_position() const { return positions.back(); }
  // time,x,y,replan,energy,steps_used  (replan = 1 on frames where the
  // policy was queried)
  void write_csv(std::ostream& os) const;
};

// Receding-horizon episode. The episode RNG stream is derived from `seed`;
// policy exceptions end the episode as a failure with their message as cause.
EpisodeRecord rollout(Policy& policy, const Env& env, int max_steps,
                      const std::optional<Perturbation>& perturbation, std::uint64_t seed);

// Replays recorded actions from the recorded initial state; returns positions.
std::vector<Vec2> replay(const Env& env, const EpisodeRecord& rec);

}  // namespace ebt::envs
