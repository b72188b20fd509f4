// src/envs.cpp

#include "ebt/envs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>

#include "ebt/binio.hpp"

namespace ebt::envs {

std::string to_string(EnvId id) { return id == EnvId::fork ? "fork" : "hang"; }

EnvId env_from_string(const std::string& s) {
  if (s == "fork") return EnvId::fork;
  if (s == "hang") return EnvId::hang;
  throw std::invalid_argument("unknown env '" + s + "' (fork|hang)");
}

void EnvParams::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("env params: " + m); };
  if (!(workspace > 0)) fail("workspace must be > 0");
  if (!(speed > 0)) fail("speed must be > 0");
  if (!(action_noise >= 0)) fail("action_noise must be >= 0");
  if (!(success_radius > 0)) fail("success_radius must be > 0");
  if (!(corridor_half_width > 0)) fail("corridor_half_width must be > 0");
  if (!(start_radius >= 0)) fail("start_radius must be >= 0");
  if (max_steps < 1) fail("max_steps must be >= 1");
  if (history < 1 || horizon < 1) fail("history and horizon must be >= 1");
  if (execute < 1 || execute > horizon) fail("execute must be in [1, horizon]");
}

namespace {

double norm(const Vec2& v) { return std::hypot(v[0], v[1]); }
Vec2 sub(const Vec2& a, const Vec2& b) { return {a[0] - b[0], a[1] - b[1]}; }

// Step of length min(speed, |to|) along `to`.
Vec2 capped(const Vec2& to, double speed) {
  const double d = norm(to);
  if (d <= speed) return to;
  return {to[0] * speed / d, to[1] * speed / d};
}

Vec2 noisy(Vec2 a, Rng& rng, double noise) {
  if (noise > 0) {
    a[0] += noise * rng.normal();
    a[1] += noise * rng.normal();
  }
  return a;
}

}  // namespace

Env::Env(EnvId id, EnvParams params) : id_(id), params_(params) { params_.validate(); }

std::vector<Vec2> Env::goals() const {
  if (id_ == EnvId::fork) return {kForkLeft, kForkRight};
  return {kHangPoint};
}

EnvState Env::reset(Rng& rng) const {
  EnvState s;
  if (id_ == EnvId::fork) {
    const double r = params_.start_radius * std::sqrt(rng.uniform());
    const double th = 2.0 * std::numbers::pi * rng.uniform();
    s.pos = {r * std::cos(th), r * std::sin(th)};
  } else {
    s.pos = {rng.uniform(-0.9, -0.6), rng.uniform(-0.8, -0.4)};
  }
  return s;
}

std::vector<double> Env::observe(const EnvState& s) const {
  const auto& p = s.pos;
  if (id_ == EnvId::fork)
    return {p[0], p[1], kForkLeft[0] - p[0], kForkLeft[1] - p[1], kForkRight[0] - p[0], kForkRight[1] - p[1]};
  return {p[0], p[1], kHangPoint[0] - p[0], kHangPoint[1] - p[1]};
}

Vec2 Env::clip(Vec2 p) const {
  for (auto& x : p) x = std::clamp(x, -params_.workspace, params_.workspace);
  return p;
}

void Env::step(EnvState& s, const Vec2& action) const {
  if (s.crashed) return;
  const Vec2 next = clip({s.pos[0] + action[0], s.pos[1] + action[1]});
  if (id_ == EnvId::hang) {
    const bool before = s.pos[0] < 0.0, after = next[0] < 0.0;
    if (before != after) {
      // Height where the segment meets the wall.
      const double t = (0.0 - s.pos[0]) / (next[0] - s.pos[0]);
      const double yc = s.pos[1] + t * (next[1] - s.pos[1]);
      if (std::abs(yc) > params_.corridor_half_width) {
        s.crashed = true;
        s.pos = {0.0, yc};
        ++s.time;
        return;
      }
      s.passed_gate = !after;
    }
  }
  s.pos = next;
  ++s.time;
}

std::optional<std::size_t> Env::goal_reached(const EnvState& s) const {
  const auto g = goals();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (norm(sub(s.pos, g[i])) <= params_.success_radius) return i;
  return std::nullopt;
}

Outcome Env::outcome(const EnvState& s) const {
  if (s.crashed) return Outcome::crashed;
  if (id_ == EnvId::hang && !s.passed_gate) return Outcome::running;
  return goal_reached(s) ? Outcome::success : Outcome::running;
}

void Env::displace(EnvState& s, const Vec2& d) const {
  Vec2 p = clip({s.pos[0] + d[0], s.pos[1] + d[1]});
  if (id_ == EnvId::hang) {
    // Teleports never carry the agent through the wall.
    constexpr double margin = 0.01;
    if (s.pos[0] < 0.0) p[0] = std::min(p[0], -margin);
    else p[0] = std::max(p[0], margin);
  }
  s.pos = p;
}

model::Architecture Env::architecture(model::Architecture base) const {
  base.obs_dim = obs_dim();
  base.history = params_.history;
  base.horizon = params_.horizon;
  base.action_dim = kActionDim;
  return base;
}

// ---------------------------------------------------------------------------
// Experts

Vec2 fork_expert_action(const Env& env, const EnvState& s, Mode mode, Rng& rng, double noise) {
  if (mode == Mode::none) throw std::invalid_argument("fork expert needs a mode");
  const Vec2 goal = mode == Mode::left ? kForkLeft : kForkRight;
  return noisy(capped(sub(goal, s.pos), env.params().speed), rng, noise);
}

Vec2 hang_expert_action(const Env& env, const EnvState& s, Rng& rng, double noise) {
  const double speed = env.params().speed;
  Vec2 a;
  if (s.pos[0] >= 0.0) {
    a = capped(sub(kHangPoint, s.pos), speed);              // traverse to the hang point
  } else if (s.pos[0] < kHangGate[0] - 0.01) {
    a = capped(sub(kHangGate, s.pos), speed);               // approach the slot
  } else {
    a = capped({0.5 * speed, -s.pos[1]}, speed);            // thread it, centring y
  }
  return noisy(a, rng, noise);
}

namespace {

ActionTrajectory expert_chunk(const Env& env, EnvState s, const std::function<Vec2(const EnvState&)>& act) {
  const std::size_t n = env.params().horizon;
  ActionTrajectory t{n, kActionDim, std::vector<double>(n * kActionDim, 0.0), false};
  for (std::size_t i = 0; i < n; ++i) {
    if (env.outcome(s) != Outcome::running) break;  // hold still once done
    const Vec2 a = act(s);
    t.actions[i * 2] = a[0];
    t.actions[i * 2 + 1] = a[1];
    env.step(s, a);
  }
  return t;
}

}  // namespace

ActionTrajectory fork_expert(const Env& env, const EnvState& s, Mode mode, Rng& rng, double noise) {
  return expert_chunk(env, s, [&](const EnvState& st) { return fork_expert_action(env, st, mode, rng, noise); });
}

ActionTrajectory hang_expert(const Env& env, const EnvState& s, Rng& rng, double noise) {
  return expert_chunk(env, s, [&](const EnvState& st) { return hang_expert_action(env, st, rng, noise); });
}

PolicyOutput ExpertPolicy::act(const ObservationWindow&, const EnvState& state, Rng& rng) {
  PolicyOutput out;
  out.actions = env_.id() == EnvId::fork ? fork_expert(env_, state, mode_, rng, noise_)
                                         : hang_expert(env_, state, rng, noise_);
  return out;
}

// ---------------------------------------------------------------------------
// Demonstrations and datasets

ObservationWindow window_at(const Demonstration& d, std::size_t t, std::size_t history) {
  if (t >= d.observations.size()) throw std::out_of_range("window_at: time past the episode");
  ObservationWindow w;
  w.history = history;
  w.obs_dim = d.observations[0].size();
  for (std::size_t k = 0; k < history; ++k) {
    const std::size_t back = history - 1 - k;
    const std::size_t src = t >= back ? t - back : 0;
    w.states.insert(w.states.end(), d.observations[src].begin(), d.observations[src].end());
  }
  return w;
}

ActionTrajectory chunk_at(const Demonstration& d, std::size_t t, std::size_t horizon) {
  if (d.actions.empty()) throw std::invalid_argument("chunk_at: empty demonstration");
  ActionTrajectory c{horizon, kActionDim, std::vector<double>(horizon * kActionDim, 0.0), false};
  for (std::size_t i = 0; i < horizon; ++i) {
    const Vec2& a = d.actions[std::min(t + i, d.actions.size() - 1)];
    c.actions[i * 2] = a[0];
    c.actions[i * 2 + 1] = a[1];
  }
  return c;
}

void NormStats::validate() const {
  if (min.size() != max.size() || min.empty()) throw std::invalid_argument("norm stats: bad sizes");
  for (std::size_t i = 0; i < min.size(); ++i)
    if (!(max[i] > min[i])) throw std::invalid_argument("norm stats: max must exceed min in every dimension");
}

double NormStats::normalize(double a, std::size_t dim) const {
  return 2.0 * (a - min[dim]) / (max[dim] - min[dim]) - 1.0;
}

double NormStats::denormalize(double u, std::size_t dim) const {
  return min[dim] + 0.5 * (u + 1.0) * (max[dim] - min[dim]);
}

ActionTrajectory NormStats::normalize(const ActionTrajectory& t) const {
  if (t.normalized) throw std::logic_error("trajectory already normalized");
  ActionTrajectory out = t;
  for (std::size_t i = 0; i < t.actions.size(); ++i) out.actions[i] = normalize(t.actions[i], i % t.action_dim);
  out.normalized = true;
  return out;
}

ActionTrajectory NormStats::denormalize(const ActionTrajectory& t) const {
  if (!t.normalized) throw std::logic_error("trajectory is not normalized");
  ActionTrajectory out = t;
  for (std::size_t i = 0; i < t.actions.size(); ++i) out.actions[i] = denormalize(t.actions[i], i % t.action_dim);
  out.normalized = false;
  return out;
}

std::size_t Dataset::sample_count() const {
  std::size_t n = 0;
  for (const auto& d : demos) n += d.length();
  return n;
}

Dataset generate_dataset(EnvId id, std::size_t episodes, std::uint64_t seed, EnvParams params) {
  if (episodes < 1) throw std::invalid_argument("generate_dataset: episodes must be >= 1");
  const Env env(id, params);
  Dataset ds;
  ds.env = id;
  ds.params = params;
  ds.seed = seed;
  const Rng root(seed);
  const std::size_t max_attempts = 50 * episodes;
  while (ds.demos.size() < episodes) {
    if (ds.attempts >= max_attempts)
      throw std::runtime_error("generate_dataset: expert failed too often (" + std::to_string(ds.attempts) +
                               " attempts)");
    Rng rng = root.substream("episode", ds.attempts++);
    Demonstration d;
    EnvState s = env.reset(rng);
    if (id == EnvId::fork) d.mode = rng.uniform_int(0, 1) == 0 ? Mode::left : Mode::right;
    d.observations.push_back(env.observe(s));
    while (env.outcome(s) == Outcome::running && s.time < params.max_steps) {
      const Vec2 a = id == EnvId::fork ? fork_expert_action(env, s, d.mode, rng, params.action_noise)
                                       : hang_expert_action(env, s, rng, params.action_noise);
      env.step(s, a);
      d.actions.push_back(a);
      d.observations.push_back(env.observe(s));
    }
    if (env.outcome(s) == Outcome::success) ds.demos.push_back(std::move(d));
  }
  ds.norm.min.assign(kActionDim, std::numeric_limits<double>::infinity());
  ds.norm.max.assign(kActionDim, -std::numeric_limits<double>::infinity());
  for (const auto& d : ds.demos)
    for (const auto& a : d.actions)
      for (std::size_t k = 0; k < kActionDim; ++k) {
        ds.norm.min[k] = std::min(ds.norm.min[k], a[k]);
        ds.norm.max[k] = std::max(ds.norm.max[k], a[k]);
      }
  ds.norm.validate();
  return ds;
}

Pairs training_pairs(const Dataset& ds) {
  Pairs p;
  for (const auto& d : ds.demos)
    for (std::size_t t = 0; t < d.length(); ++t) {
      const auto w = window_at(d, t, ds.params.history);
      const auto c = ds.norm.normalize(chunk_at(d, t, ds.params.horizon));
      p.windows.insert(p.windows.end(), w.states.begin(), w.states.end());
      p.actions.insert(p.actions.end(), c.actions.begin(), c.actions.end());
      ++p.rows;
    }
  return p;
}

// ---------------------------------------------------------------------------
// Dataset file

namespace {
constexpr char kDataMagic[8] = {'E', 'B', 'T', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kDataVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  binio::Writer w;
  w.bytes(kDataMagic, 8);
  w.u32(kDataVersion);
  w.u32(static_cast<std::uint32_t>(d.env));
  const auto& p = d.params;
  for (double v : {p.workspace, p.speed, p.action_noise, p.success_radius, p.corridor_half_width, p.start_radius})
    w.f64(v);
  w.u32(static_cast<std::uint32_t>(p.max_steps));
  w.u32(static_cast<std::uint32_t>(p.history));
  w.u32(static_cast<std::uint32_t>(p.horizon));
  w.u32(static_cast<std::uint32_t>(p.execute));
  w.u64(d.seed);
  w.u64(d.attempts);
  const std::size_t obs_dim = Env(d.env, d.params).obs_dim();
  w.u32(static_cast<std::uint32_t>(obs_dim));
  w.u32(static_cast<std::uint32_t>(d.demos.size()));
  for (const auto& demo : d.demos) {
    w.u32(static_cast<std::uint32_t>(demo.mode));
    w.u32(static_cast<std::uint32_t>(demo.length()));
    for (const auto& o : demo.observations)
      for (double v : o) w.f64(v);
    for (const auto& a : demo.actions) {
      w.f64(a[0]);
      w.f64(a[1]);
    }
  }
  for (double v : d.norm.min) w.f64(v);
  for (double v : d.norm.max) w.f64(v);
  return w.take();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  binio::Reader<DatasetError> r(bytes, "dataset");
  if (r.str(8) != std::string(kDataMagic, 8)) throw DatasetError("not a dataset file (bad magic)");
  if (const auto v = r.u32(); v != kDataVersion) throw DatasetError("unsupported dataset version " + std::to_string(v));
  Dataset d;
  const auto env = r.u32();
  if (env > 1) throw DatasetError("unknown env id " + std::to_string(env));
  d.env = static_cast<EnvId>(env);
  auto& p = d.params;
  for (double* f : {&p.workspace, &p.speed, &p.action_noise, &p.success_radius, &p.corridor_half_width, &p.start_radius})
    *f = r.f64();
  p.max_steps = static_cast<int>(r.u32());
  p.history = r.u32();
  p.horizon = r.u32();
  p.execute = r.u32();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError(e.what());
  }
  d.seed = r.u64();
  d.attempts = r.u64();
  const std::uint32_t obs_dim = r.u32();
  if (obs_dim != Env(d.env, p).obs_dim()) throw DatasetError("observation width does not match env");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Demonstration demo;
    const auto mode = r.u32();
    if (mode > 2) throw DatasetError("bad mode label");
    demo.mode = static_cast<Mode>(mode);
    const std::uint32_t len = r.u32();
    r.need((static_cast<std::size_t>(len + 1) * obs_dim + 2 * static_cast<std::size_t>(len)) * 8);
    demo.observations.assign(len + 1, std::vector<double>(obs_dim));
    for (auto& o : demo.observations)
      for (auto& v : o) v = r.f64();
    demo.actions.resize(len);
    for (auto& a : demo.actions) a = {r.f64(), r.f64()};
    d.demos.push_back(std::move(demo));
  }
  d.norm.min = {r.f64(), r.f64()};
  d.norm.max = {r.f64(), r.f64()};
  if (!r.done()) throw DatasetError("trailing bytes after dataset");
  try {
    d.norm.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError(e.what());
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  try {
    binio::write_file(path, encode_dataset(d));
  } catch (const std::runtime_error& e) {
    throw DatasetError(e.what());
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = binio::read_file(path);
  } catch (const std::runtime_error& e) {
    throw DatasetError(e.what());
  }
  return decode_dataset(bytes);
}

// ---------------------------------------------------------------------------
// Rollouts

Perturbation random_perturbation(int step, double level, Rng& rng) {
  const double th = 2.0 * std::numbers::pi * rng.uniform();
  return {step, {level * std::cos(th), level * std::sin(th)}};
}

void EpisodeRecord::write_csv(std::ostream& os) const {
  os << "time,x,y,replan,energy,steps_used\n";
  std::size_t k = 0;
  char buf[160];
  for (std::size_t t = 0; t < positions.size(); ++t) {
    const bool re = k < replans.size() && replans[k].time == static_cast<int>(t);
    if (re) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,1,%.17g,%d\n", t, positions[t][0], positions[t][1],
                    replans[k].energy, replans[k].steps_used);
      ++k;
    } else {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,0,,\n", t, positions[t][0], positions[t][1]);
    }
    os << buf;
  }
}

namespace {

struct History {
  std::size_t h;
  std::vector<std::vector<double>> obs;
  ObservationWindow window() const {
    ObservationWindow w{h, obs.back().size(), {}};
    for (std::size_t k = 0; k < h; ++k) {
      const std::size_t back = h - 1 - k;
      const std::size_t src = obs.size() - 1 >= back ? obs.size() - 1 - back : 0;
      w.states.insert(w.states.end(), obs[src].begin(), obs[src].end());
    }
    return w;
  }
};

}  // namespace

EpisodeRecord rollout(Policy& policy, const Env& env, int max_steps,
                      const std::optional<Perturbation>& perturbation, std::uint64_t seed) {
  EpisodeRecord rec;
  rec.env = env.id();
  rec.seed = seed;
  rec.perturbation = perturbation;
  const Rng root(seed);
  Rng reset_rng = root.substream("reset");
  Rng policy_rng = root.substream("policy");

  EnvState s = env.reset(reset_rng);
  rec.initial = s;
  rec.positions.push_back(s.pos);
  History hist{env.params().history, {env.observe(s)}};

  auto finish = [&](bool ok, std::string cause) {
    rec.success = ok;
    rec.cause = std::move(cause);
    if (ok && env.id() == EnvId::fork) rec.goal = static_cast<int>(*env.goal_reached(s));
    return rec;
  };

  auto maybe_perturb = [&] {
    if (perturbation && perturbation->step == s.time && !rec.perturbed_at) {
      env.displace(s, perturbation->displacement);
      rec.perturbed_at = s.time;
      rec.positions.back() = s.pos;
      hist.obs.back() = env.observe(s);
    }
  };

  while (s.time < max_steps) {
    maybe_perturb();
    PolicyOutput out;
    try {
      out = policy.act(hist.window(), s, policy_rng);
    } catch (const std::exception& e) {
      return finish(false, std::string("policy aborted: ") + e.what());
    }
    if (out.actions.action_dim != kActionDim || out.actions.actions.size() < kActionDim)
      return finish(false, "policy returned a malformed chunk");
    rec.replans.push_back({s.time, out.energy, out.steps_used});
    const std::size_t n = std::min(env.params().execute, out.actions.horizon);
    for (std::size_t i = 0; i < n && s.time < max_steps; ++i) {
      // Mid-chunk perturbations do not trigger a re-plan; the chunk runs on.
      if (i > 0) maybe_perturb();
      const Vec2 a{out.actions.at(i, 0), out.actions.at(i, 1)};
      env.step(s, a);
      rec.actions.push_back(a);
      rec.positions.push_back(s.pos);
      hist.obs.push_back(env.observe(s));
      switch (env.outcome(s)) {
        case Outcome::success: return finish(true, "");
        case Outcome::crashed: return finish(false, "hit the wall");
        case Outcome::running: break;
      }
    }
  }
  return finish(false, "step limit");
}

std::vector<Vec2> replay(const Env& env, const EpisodeRecord& rec) {
  EnvState s = rec.initial;
  std::vector<Vec2> pos{s.pos};
  for (std::size_t t = 0; t < rec.actions.size(); ++t) {
    if (rec.perturbed_at && *rec.perturbed_at == static_cast<int>(t)) {
      env.displace(s, rec.perturbation->displacement);
      pos.back() = s.pos;
    }
    env.step(s, rec.actions[t]);
    pos.push_back(s.pos);
  }
  return pos;
}

}  // namespace ebt::envs
