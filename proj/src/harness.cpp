// src/harness.cpp

#include "ebt/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "ebt/binio.hpp"

namespace ebt::harness {

std::string to_string(PolicyKind k) { return k == PolicyKind::ebt ? "ebt" : "ddpm"; }

PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "ebt") return PolicyKind::ebt;
  if (s == "ddpm") return PolicyKind::ddpm;
  throw std::invalid_argument("unknown policy '" + s + "' (expected ebt or ddpm)");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) {
  binio::write_file(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

model::NamedTensor vec_tensor(const std::string& name, const std::vector<double>& v) {
  return {name, ad::Tensor::from({v.size()}, v)};
}

const model::NamedTensor* find_extra(const std::vector<model::NamedTensor>& extras, const std::string& name) {
  for (const auto& e : extras)
    if (e.name == name) return &e;
  return nullptr;
}

// Owns its model copy so that instances can run on separate threads.
class OwnedPolicy final : public envs::Policy {
 public:
  OwnedPolicy(const LoadedPolicy& p, const ExperimentConfig& cfg, int steps) : model_(p.model) {
    if (p.kind == PolicyKind::ebt) {
      inner_ = std::make_unique<inference::EbtPolicy>(model_, p.norm, cfg.sampler, steps);
    } else {
      if (steps < 1) throw std::invalid_argument("ddpm policy needs a fixed step count");
      denoiser_ = std::make_unique<diffusion::Denoiser>(model_, cfg.diffusion.time_embedding);
      inner_ = std::make_unique<diffusion::DiffusionPolicy>(*denoiser_, p.norm, cfg.diffusion, steps);
    }
  }
  envs::PolicyOutput act(const model::ObservationWindow& w, const envs::EnvState& s, Rng& rng) override {
    return inner_->act(w, s, rng);
  }

 private:
  model::EnergyModel model_;
  std::unique_ptr<diffusion::Denoiser> denoiser_;
  std::unique_ptr<envs::Policy> inner_;
};

// Accumulates wall-clock time spent in act().
class Timed final : public envs::Policy {
 public:
  explicit Timed(std::unique_ptr<envs::Policy> p) : p_(std::move(p)) {}
  envs::PolicyOutput act(const model::ObservationWindow& w, const envs::EnvState& s, Rng& rng) override {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = p_->act(w, s, rng);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++calls;
    return out;
  }
  double seconds = 0.0;
  std::size_t calls = 0;

 private:
  std::unique_ptr<envs::Policy> p_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Data and checkpoints

std::uint64_t data_seed(const ExperimentConfig& cfg) { return Rng(cfg.require_seed()).substream("data").seed(); }

envs::Dataset make_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) {
    envs::Dataset d = envs::load_dataset(cfg.dataset);
    if (d.env != cfg.env) throw std::invalid_argument("dataset " + cfg.dataset + " is for env " + envs::to_string(d.env));
    return d;
  }
  return envs::generate_dataset(cfg.env, cfg.demos, data_seed(cfg), cfg.env_params);
}

train::TrainingSet training_set(const envs::Dataset& d) {
  const auto pairs = envs::training_pairs(d);
  const std::size_t ws = pairs.windows.size() / pairs.rows, as = pairs.actions.size() / pairs.rows;
  return {ad::Tensor::from({pairs.rows, ws}, pairs.windows), ad::Tensor::from({pairs.rows, as}, pairs.actions)};
}

std::vector<model::NamedTensor> checkpoint_extras(const envs::NormStats& norm, int epoch) {
  return {vec_tensor("extra/norm_min", norm.min), vec_tensor("extra/norm_max", norm.max),
          vec_tensor("extra/epoch", {static_cast<double>(epoch)})};
}

LoadedPolicy load_policy(const fs::path& checkpoint) {
  model::Checkpoint c = model::load_checkpoint(checkpoint);
  const auto* lo = find_extra(c.extras, "extra/norm_min");
  const auto* hi = find_extra(c.extras, "extra/norm_max");
  if (!lo || !hi) throw model::CheckpointError(checkpoint.string() + ": no action normalization stored");
  envs::NormStats norm{lo->value.to_vector(), hi->value.to_vector()};
  norm.validate();
  const auto* ep = find_extra(c.extras, "extra/epoch");
  const PolicyKind kind = c.arch.head == model::Head::energy ? PolicyKind::ebt : PolicyKind::ddpm;
  return {kind, model::EnergyModel(c.arch, c.params), std::move(norm), ep ? static_cast<int>(ep->value[0]) : 0};
}

std::unique_ptr<envs::Policy> make_policy(const LoadedPolicy& p, const ExperimentConfig& cfg, int steps) {
  return std::make_unique<OwnedPolicy>(p, cfg, steps);
}

// ---------------------------------------------------------------------------
// Training

fs::path checkpoint_path(const fs::path& dir, int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epoch);
  return dir / "checkpoints" / buf;
}

TrainResult train_policy(const ExperimentConfig& cfg, PolicyKind kind, const envs::Dataset& data, const fs::path& out,
                         const std::function<void(const train::EpochReport&)>& progress) {
  cfg.validate();
  const Rng root(cfg.require_seed());
  const std::uint64_t k = kind == PolicyKind::ebt ? 0 : 1;
  Rng init = root.substream("init", k);
  Rng rng = root.substream("train", k);
  const auto arch = cfg.architecture(kind == PolicyKind::ebt ? model::Head::energy : model::Head::noise);
  model::EnergyModel m(arch, init);
  const train::TrainingSet set = training_set(data);
  fs::create_directories(out / "checkpoints");

  TrainResult res;
  res.parameter_count = m.parameter_count();
  auto save = [&](int epoch) {
    const fs::path p = checkpoint_path(out, epoch);
    model::save_checkpoint(p, m, checkpoint_extras(data.norm, epoch));
    res.checkpoints.push_back(p);
    return fs::relative(p, out).generic_string();
  };
  save(0);

  std::unique_ptr<train::Trainer> ebt;
  std::unique_ptr<diffusion::Denoiser> den;
  std::unique_ptr<diffusion::DdpmTrainer> ddpm;
  if (kind == PolicyKind::ebt) {
    ebt = std::make_unique<train::Trainer>(m, cfg.train, cfg.sampler);
  } else {
    den = std::make_unique<diffusion::Denoiser>(m, cfg.diffusion.time_embedding);
    ddpm = std::make_unique<diffusion::DdpmTrainer>(*den, cfg.train, cfg.diffusion);
  }
  const int every = cfg.train.checkpoint_every;
  for (int e = 1; e <= cfg.train.epochs; ++e) {
    train::EpochReport r = ebt ? ebt->train_epoch(set, rng) : ddpm->train_epoch(set, rng);
    if ((every > 0 && e % every == 0) || e == cfg.train.epochs) r.checkpoint = save(e);
    res.report.epochs.push_back(r);
    if (progress) progress(r);
  }
  model::save_checkpoint(out / (to_string(kind) + ".ckpt"), m, checkpoint_extras(data.norm, cfg.train.epochs));
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<EpisodePlan> episode_plan(const ExperimentConfig& cfg, double level, std::size_t episodes) {
  const Rng root(cfg.require_seed());
  std::vector<EpisodePlan> plan(episodes);
  for (std::size_t k = 0; k < episodes; ++k) {
    plan[k].seed = root.substream("eval", k).next_u64();
    if (level > 0.0) {
      Rng p = root.substream("perturb", k);
      plan[k].perturbation = envs::random_perturbation(cfg.eval.perturb_step, level, p);
    }
  }
  return plan;
}

EpisodeBatch run_episodes(const PolicyFactory& factory, const envs::Env& env, const std::vector<EpisodePlan>& plan,
                          std::size_t threads) {
  EpisodeBatch batch;
  batch.records.resize(plan.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    try {
      Timed policy(factory());
      for (std::size_t k; (k = next++) < plan.size();)
        batch.records[k] = envs::rollout(policy, env, env.params().max_steps, plan[k].perturbation, plan[k].seed);
      std::lock_guard<std::mutex> lock(mu);
      batch.seconds += policy.seconds;
      batch.inferences += policy.calls;
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!failure) failure = std::current_exception();
      next = plan.size();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, plan.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return batch;
}

bool midpoint_ending(const envs::EpisodeRecord& rec) {
  if (rec.env != envs::EnvId::fork || rec.success) return false;
  // Closer to the centre line than to either goal's column.
  return std::abs(rec.final_position()[0]) < 0.5 * envs::kForkRight[0];
}

ConditionSummary summarize(const std::string& policy, int steps, double perturb, const EpisodeBatch& batch) {
  ConditionSummary s;
  s.policy = policy;
  s.steps = steps;
  s.perturb = perturb;
  s.episodes = batch.records.size();
  std::vector<double> used, energy;
  for (const auto& r : batch.records) {
    s.successes += r.success;
    if (r.goal == 0) ++s.left;
    if (r.goal == 1) ++s.right;
    s.midpoint += midpoint_ending(r);
    for (const auto& p : r.replans) {
      used.push_back(p.steps_used);
      energy.push_back(p.energy);
    }
  }
  s.ci = stats::wilson(s.successes, s.episodes);
  s.mean_steps = stats::mean(used);
  s.median_steps = stats::median(used);
  if (policy == "ebt") s.mean_final_energy = stats::mean(energy);
  s.seconds_per_inference = batch.inferences ? batch.seconds / static_cast<double>(batch.inferences) : 0.0;
  return s;
}

void write_summary_header(std::ostream& os) {
  os << "policy,steps,perturb,episodes,successes,rate,ci_low,ci_high,mean_steps_used,median_steps_used,"
        "mean_final_energy,left,right,midpoint,note\n";
}

void write_summary_row(std::ostream& os, const ConditionSummary& s) {
  os << s.policy << ',' << (s.steps == 0 ? std::string("dynamic") : std::to_string(s.steps)) << ','
     << fmt(s.perturb) << ',' << s.episodes << ',';
  if (!s.note.empty() && s.episodes == 0) {
    os << ",,,,,,,,,," << s.note << '\n';
    return;
  }
  os << s.successes << ',' << fmt(s.rate()) << ',' << fmt(s.ci.low) << ',' << fmt(s.ci.high) << ','
     << fmt(s.mean_steps) << ',' << fmt(s.median_steps) << ','
     << (s.mean_final_energy ? fmt(*s.mean_final_energy) : std::string()) << ',' << s.left << ',' << s.right
     << ',' << s.midpoint << ',' << s.note << '\n';
}

void write_timing_header(std::ostream& os) { os << "policy,steps,perturb,seconds_per_inference\n"; }

void write_timing_row(std::ostream& os, const ConditionSummary& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", s.seconds_per_inference);
  os << s.policy << ',' << (s.steps == 0 ? std::string("dynamic") : std::to_string(s.steps)) << ','
     << fmt(s.perturb) << ',' << buf << '\n';
}

ConditionSummary evaluate(const LoadedPolicy& p, const ExperimentConfig& cfg, int steps, double perturb,
                          std::size_t episodes, EpisodeBatch* batch_out) {
  const envs::Env env(cfg.env, cfg.env_params);
  auto batch = run_episodes([&] { return make_policy(p, cfg, steps); }, env, episode_plan(cfg, perturb, episodes),
                            cfg.eval.threads);
  ConditionSummary s = summarize(to_string(p.kind), steps, perturb, batch);
  if (batch_out) *batch_out = std::move(batch);
  return s;
}

const envs::Replan* probe_replan(const envs::EpisodeRecord& rec, int perturb_step) {
  for (const auto& r : rec.replans)
    if (r.time >= perturb_step) return &r;
  return nullptr;
}

std::vector<DifficultyRow> steps_vs_difficulty(const LoadedPolicy& p, const ExperimentConfig& cfg,
                                               std::size_t episodes) {
  if (p.kind != PolicyKind::ebt) throw std::invalid_argument("steps vs difficulty needs an EBT checkpoint");
  std::vector<DifficultyRow> rows;
  for (double level : cfg.eval.perturb_levels) {
    EpisodeBatch batch;
    evaluate(p, cfg, 0, level, episodes, &batch);
    DifficultyRow row;
    row.level = level;
    row.episodes = batch.records.size();
    row.cutoff_disabled = cfg.sampler.tau <= 0.0;
    for (const auto& r : batch.records) {
      row.recovered += r.success;
      if (const auto* probe = probe_replan(r, cfg.eval.perturb_step)) {
        row.probe_steps.push_back(probe->steps_used);
        row.probe_energy.push_back(probe->energy);
      }
    }
    row.ci = stats::wilson(row.recovered, row.episodes);
    row.mean_steps = stats::mean(row.probe_steps);
    row.median_steps = stats::median(row.probe_steps);
    row.mean_energy = stats::mean(row.probe_energy);
    if (!rows.empty() && !row.probe_energy.empty() && !rows.front().probe_energy.empty())
      row.p_energy_greater = stats::rank_test_greater(row.probe_energy, rows.front().probe_energy);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_difficulty_csv(std::ostream& os, const std::vector<DifficultyRow>& rows) {
  os << "level,episodes,recovered,recovery_rate,ci_low,ci_high,mean_steps_used,median_steps_used,"
        "mean_final_energy,p_energy_greater,cutoff\n";
  for (const auto& r : rows) {
    os << fmt(r.level) << ',' << r.episodes << ',' << r.recovered << ','
       << fmt(static_cast<double>(r.recovered) / static_cast<double>(r.episodes)) << ',' << fmt(r.ci.low) << ','
       << fmt(r.ci.high) << ',' << fmt(r.mean_steps) << ',' << fmt(r.median_steps) << ',' << fmt(r.mean_energy)
       << ',' << (r.p_energy_greater ? fmt(*r.p_energy_greater) : std::string()) << ','
       << (r.cutoff_disabled ? "cutoff disabled" : "enabled") << '\n';
  }
}

std::vector<CurvePoint> success_curve(const fs::path& dir, const std::vector<int>& epochs,
                                      const ExperimentConfig& cfg, int steps, std::size_t episodes) {
  std::vector<int> wanted = epochs;
  if (wanted.empty() && fs::is_directory(dir / "checkpoints")) {
    for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) {
      const std::string name = entry.path().filename().string();
      int e = 0;
      if (std::sscanf(name.c_str(), "epoch_%d.ckpt", &e) == 1 && name == checkpoint_path(dir, e).filename())
        wanted.push_back(e);
    }
    std::sort(wanted.begin(), wanted.end());
  }
  std::vector<CurvePoint> out;
  for (int e : wanted) {
    CurvePoint pt;
    pt.epoch = e;
    const fs::path p = checkpoint_path(dir, e);
    if (!fs::exists(p)) {
      pt.note = "missing checkpoint";
    } else {
      pt.summary = evaluate(load_policy(p), cfg, steps, 0.0, episodes);
    }
    out.push_back(std::move(pt));
  }
  return out;
}

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& points) {
  os << "epoch,episodes,successes,rate,ci_low,ci_high,note\n";
  for (const auto& p : points) {
    if (!p.summary) {
      os << p.epoch << ",,,,,," << p.note << '\n';
      continue;
    }
    const auto& s = *p.summary;
    os << p.epoch << ',' << s.episodes << ',' << s.successes << ',' << fmt(s.rate()) << ',' << fmt(s.ci.low) << ','
       << fmt(s.ci.high) << ',' << p.note << '\n';
  }
}

// ---------------------------------------------------------------------------
// Manifests

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw RunError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(binio::read_file(path)); }

void write_manifest(const fs::path& path, const Manifest& m) {
  std::ostringstream os;
  os << "ebt-manifest 1\n";
  os << "command " << m.command << '\n';
  for (const auto& [k, v] : m.options) os << "option " << k << '=' << v << '\n';
  os << "seed " << m.seed << '\n';
  os << "config config.ini " << m.config_sha256 << '\n';
  for (const auto& [p, d] : m.inputs) os << "input " << d << ' ' << p << '\n';
  for (const auto& [p, d] : m.artifacts) os << "artifact " << d << ' ' << p << '\n';
  write_text(path, os.str());
}

Manifest read_manifest(const fs::path& path) {
  const auto bytes = binio::read_file(path);
  std::istringstream is(std::string(bytes.begin(), bytes.end()));
  std::string line;
  Manifest m;
  int n = 0;
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": " + why);
  };
  while (std::getline(is, line)) {
    ++n;
    if (n == 1) {
      if (line != "ebt-manifest 1") fail("not a manifest");
      continue;
    }
    const auto sp = line.find(' ');
    if (sp == std::string::npos) fail("malformed line");
    const std::string tag = line.substr(0, sp), rest = line.substr(sp + 1);
    if (tag == "command") {
      m.command = rest;
    } else if (tag == "option") {
      const auto eq = rest.find('=');
      if (eq == std::string::npos) fail("malformed option");
      m.options[rest.substr(0, eq)] = rest.substr(eq + 1);
    } else if (tag == "seed") {
      m.seed = std::stoull(rest);
    } else if (tag == "config") {
      const auto sp2 = rest.find(' ');
      if (sp2 == std::string::npos) fail("malformed config line");
      m.config_sha256 = rest.substr(sp2 + 1);
    } else if (tag == "input" || tag == "artifact") {
      const auto sp2 = rest.find(' ');
      if (sp2 == std::string::npos) fail("malformed " + tag);
      (tag == "input" ? m.inputs : m.artifacts).emplace_back(rest.substr(sp2 + 1), rest.substr(0, sp2));
    } else {
      fail("unknown entry '" + tag + "'");
    }
  }
  if (n == 0) fail("empty manifest");
  return m;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// The hashed config excludes the output directory, which a replay changes.
std::string canonical_config(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.output_dir.clear();
  return c.to_text();
}

std::string opt(const Options& o, const std::string& key, const std::string& fallback = {}) {
  const auto it = o.find(key);
  return it == o.end() ? fallback : it->second;
}

int int_opt(const Options& o, const std::string& key, int fallback) {
  const std::string v = opt(o, key);
  if (v.empty()) return fallback;
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("option " + key + ": expected an integer, got '" + v + "'");
  }
}

double double_opt(const Options& o, const std::string& key, double fallback) {
  const std::string v = opt(o, key);
  if (v.empty()) return fallback;
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("option " + key + ": expected a number, got '" + v + "'");
  }
}

void check_options(const Options& o, const std::set<std::string>& allowed, const std::string& command) {
  for (const auto& [k, v] : o)
    if (!allowed.count(k)) throw std::invalid_argument(command + ": unknown option '" + k + "'");
}

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }
  std::ofstream open(const std::string& rel, bool deterministic = true) {
    artifacts.push_back({rel, deterministic});
    fs::create_directories((dir_ / rel).parent_path());
    std::ofstream f(dir_ / rel, std::ios::binary);
    if (!f) throw RunError("cannot write " + (dir_ / rel).string());
    return f;
  }
  void add(const fs::path& absolute) { artifacts.push_back({fs::relative(absolute, dir_).generic_string(), true}); }
  const fs::path& dir() const { return dir_; }
  std::vector<Artifact> artifacts;

 private:
  fs::path dir_;
};

// Default step count when none is given: dynamic for EBT, the full schedule for DDPM.
int default_steps(const LoadedPolicy& p, const ExperimentConfig& cfg) {
  return p.kind == PolicyKind::ebt ? 0 : cfg.diffusion.train_steps;
}

int steps_option(const Options& o, const LoadedPolicy& p, const ExperimentConfig& cfg) {
  if (opt(o, "dynamic") == "1") {
    if (o.count("steps")) throw std::invalid_argument("--steps and --dynamic are exclusive");
    if (p.kind != PolicyKind::ebt) throw std::invalid_argument("--dynamic needs an EBT checkpoint");
    return 0;
  }
  return int_opt(o, "steps", default_steps(p, cfg));
}

LoadedPolicy require_policy(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(std::string("no ") + what + " given");
  if (!fs::exists(path)) throw std::invalid_argument(std::string(what) + " not found: " + path);
  return load_policy(path);
}

void write_episodes(std::ostream& os, const std::string& label, const EpisodeBatch& b, int perturb_step,
                    bool header) {
  if (header) os << "condition,episode,seed,success,goal,final_x,final_y,replans,probe_steps_used,probe_energy,cause\n";
  for (std::size_t k = 0; k < b.records.size(); ++k) {
    const auto& r = b.records[k];
    const auto* probe = probe_replan(r, perturb_step);
    os << label << ',' << k << ',' << r.seed << ',' << (r.success ? 1 : 0) << ',' << r.goal << ','
       << fmt(r.final_position()[0]) << ',' << fmt(r.final_position()[1]) << ',' << r.replans.size() << ','
       << (probe ? std::to_string(probe->steps_used) : std::string()) << ','
       << (probe ? fmt(probe->energy) : std::string()) << ',' << r.cause << '\n';
  }
}

std::string condition_label(const std::string& policy, int steps, double perturb) {
  return policy + ":" + (steps == 0 ? std::string("dynamic") : std::to_string(steps)) + ":" + fmt(perturb);
}

void cmd_gen_data(const ExperimentConfig& cfg, Outputs& out, std::ostream& log) {
  const envs::Dataset d = envs::generate_dataset(cfg.env, cfg.demos, data_seed(cfg), cfg.env_params);
  envs::save_dataset(out.dir() / "dataset.bin", d);
  out.add(out.dir() / "dataset.bin");
  auto f = out.open("dataset.csv");
  f << "demo,mode,length,final_x,final_y\n";
  std::size_t left = 0;
  for (std::size_t i = 0; i < d.demos.size(); ++i) {
    const auto& dm = d.demos[i];
    left += dm.mode == envs::Mode::left;
    f << i << ',' << (dm.mode == envs::Mode::left ? "left" : dm.mode == envs::Mode::right ? "right" : "none") << ','
      << dm.length() << ',' << fmt(dm.observations.back()[0]) << ',' << fmt(dm.observations.back()[1]) << '\n';
  }
  log << "gen-data: " << d.demos.size() << " demonstrations (" << d.attempts << " attempts)";
  if (cfg.env == envs::EnvId::fork) log << ", " << left << " left / " << d.demos.size() - left << " right";
  log << '\n';
}

void cmd_train(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  const PolicyKind kind = policy_kind_from_string(opt(o, "policy", "ebt"));
  const envs::Dataset d = make_dataset(cfg);
  auto res = train_policy(cfg, kind, d, out.dir(), [&](const train::EpochReport& r) {
    log << "epoch " << r.epoch << " loss " << fmt(r.loss) << " skipped " << r.skipped << '\n';
  });
  for (const auto& p : res.checkpoints) out.add(p);
  out.add(out.dir() / (to_string(kind) + ".ckpt"));
  auto f = out.open("train.csv");
  res.report.write_csv(f);
  auto t = out.open("train_timing.csv", false);
  res.report.write_timing_csv(t);
  log << "train: " << to_string(kind) << ", " << res.parameter_count << " parameters\n";
}

void cmd_eval(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  const LoadedPolicy p = require_policy(cfg.eval.checkpoint, "checkpoint");
  const int steps = steps_option(o, p, cfg);
  const double perturb = double_opt(o, "perturb", 0.0);
  EpisodeBatch b;
  const auto s = evaluate(p, cfg, steps, perturb, cfg.eval.episodes, &b);
  auto f = out.open("eval.csv");
  write_summary_header(f);
  write_summary_row(f, s);
  auto e = out.open("eval_episodes.csv");
  write_episodes(e, condition_label(s.policy, steps, perturb), b, cfg.eval.perturb_step, true);
  auto t = out.open("eval_timing.csv", false);
  write_timing_header(t);
  write_timing_row(t, s);
  log << "eval: " << s.successes << "/" << s.episodes << " successes\n";
}

void cmd_rollout(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  const LoadedPolicy p = require_policy(cfg.eval.checkpoint, "checkpoint");
  const int steps = steps_option(o, p, cfg);
  std::vector<double> levels = cfg.eval.perturb_levels;
  if (o.count("perturb")) levels = {double_opt(o, "perturb", 0.0)};
  auto f = out.open("rollout.csv");
  auto e = out.open("rollout_episodes.csv");
  auto t = out.open("rollout_timing.csv", false);
  write_summary_header(f);
  write_timing_header(t);
  bool header = true;
  for (double level : levels) {
    EpisodeBatch b;
    const auto s = evaluate(p, cfg, steps, level, cfg.eval.episodes, &b);
    write_summary_row(f, s);
    write_timing_row(t, s);
    write_episodes(e, condition_label(s.policy, steps, level), b, cfg.eval.perturb_step, header);
    header = false;
    log << "rollout: perturb " << level << ": " << s.successes << "/" << s.episodes << " successes\n";
  }
}

void cmd_compare(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  std::vector<LoadedPolicy> policies;
  policies.push_back(require_policy(cfg.eval.checkpoint, "checkpoint"));
  policies.push_back(require_policy(cfg.eval.baseline_checkpoint, "baseline checkpoint"));
  const double perturb = double_opt(o, "perturb", 0.0);
  auto f = out.open("compare.csv");
  auto e = out.open("compare_episodes.csv");
  auto t = out.open("compare_timing.csv", false);
  write_summary_header(f);
  write_timing_header(t);
  bool header = true;
  for (const auto& p : policies) {
    std::vector<int> grid = cfg.eval.steps;
    if (p.kind == PolicyKind::ebt && cfg.eval.dynamic) grid.push_back(0);
    for (int steps : grid) {
      const int limit = p.kind == PolicyKind::ebt ? cfg.sampler.max_infer_steps : cfg.diffusion.train_steps;
      if (steps > limit) {
        ConditionSummary s;
        s.policy = to_string(p.kind);
        s.steps = steps;
        s.perturb = perturb;
        s.note = "skipped: above the " + std::to_string(limit) + "-step budget";
        write_summary_row(f, s);
        continue;
      }
      EpisodeBatch b;
      const auto s = evaluate(p, cfg, steps, perturb, cfg.eval.episodes, &b);
      write_summary_row(f, s);
      write_timing_row(t, s);
      write_episodes(e, condition_label(s.policy, steps, perturb), b, cfg.eval.perturb_step, header);
      header = false;
      log << "compare: " << condition_label(s.policy, steps, perturb) << ": " << s.successes << "/" << s.episodes
          << '\n';
    }
  }
}

void cmd_trace(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  const LoadedPolicy p = require_policy(cfg.eval.checkpoint, "checkpoint");
  const int steps = steps_option(o, p, cfg);
  const double perturb = double_opt(o, "perturb", 0.0);
  const int episode = int_opt(o, "episode", 0);
  if (episode < 0) throw std::invalid_argument("--episode must be non-negative");
  const auto plan = episode_plan(cfg, perturb, static_cast<std::size_t>(episode) + 1).back();
  const envs::Env env(cfg.env, cfg.env_params);

  // Record every refinement chain along the way.
  struct Recording final : envs::Policy {
    Recording(const LoadedPolicy& p, const ExperimentConfig& c, int s)
        : model(p.model), norm(p.norm), cfg(c), steps(s), inner(make_policy(p, c, s)) {}
    envs::PolicyOutput act(const model::ObservationWindow& w, const envs::EnvState& st, Rng& rng) override {
      if (model.arch().head != model::Head::energy) return inner->act(w, st, rng);
      const auto r = steps == 0 ? inference::infer(model, w, &norm, cfg.sampler, rng)
                                : inference::infer_fixed(model, w, &norm, steps, cfg.sampler, rng);
      if (r.status != inference::Status::ok) throw std::runtime_error("inference aborted: " + r.error);
      chains.push_back({st.time, r.trace});
      return {r.trajectory, r.final_energy, r.steps_used};
    }
    model::EnergyModel model;
    envs::NormStats norm;
    const ExperimentConfig& cfg;
    int steps;
    std::unique_ptr<envs::Policy> inner;
    std::vector<std::pair<int, sampler::ChainTrace>> chains;
  } policy(p, cfg, steps);

  const auto rec = envs::rollout(policy, env, env.params().max_steps, plan.perturbation, plan.seed);
  auto traj = out.open("trace_episode.csv");
  rec.write_csv(traj);
  auto tl = out.open("trace_energy.csv");
  inference::write_energy_timeline(tl, rec);
  if (!policy.chains.empty()) {
    auto c = out.open("trace_chains.csv");
    c << "frame,step,energy,grad_norm,alpha\n";
    for (const auto& [frame, trace] : policy.chains)
      for (std::size_t i = 0; i < trace.steps.size(); ++i)
        c << frame << ',' << i << ',' << fmt(trace.steps[i].energy) << ',' << fmt(trace.steps[i].grad_norm) << ','
          << fmt(trace.steps[i].alpha) << '\n';
  }
  log << "trace: episode " << episode << (rec.success ? " succeeded" : " failed: " + rec.cause) << ", "
      << rec.replans.size() << " re-plans\n";
}

void cmd_curve(const ExperimentConfig& cfg, const Options& o, Outputs& out, std::ostream& log) {
  const std::string dir = opt(o, "run");
  if (dir.empty()) throw std::invalid_argument("curve: --run <training output directory> is required");
  if (!fs::is_directory(dir)) throw std::invalid_argument("curve: not a directory: " + dir);
  // The step count default depends on the policy kind of the final model.
  int steps = int_opt(o, "steps", -1);
  if (opt(o, "dynamic") == "1") steps = 0;
  if (steps < 0) {
    const fs::path ebt = fs::path(dir) / "ebt.ckpt";
    steps = fs::exists(ebt) ? 0 : cfg.diffusion.train_steps;
  }
  const auto points = success_curve(dir, cfg.eval.curve_epochs, cfg, steps, cfg.eval.episodes);
  auto f = out.open("curve.csv");
  write_curve_csv(f, points);
  log << "curve: " << points.size() << " points\n";
}

void cmd_difficulty(const ExperimentConfig& cfg, Outputs& out, std::ostream& log) {
  const LoadedPolicy p = require_policy(cfg.eval.checkpoint, "checkpoint");
  const auto rows = steps_vs_difficulty(p, cfg, cfg.eval.episodes);
  auto f = out.open("difficulty.csv");
  write_difficulty_csv(f, rows);
  auto e = out.open("difficulty_episodes.csv");
  e << "level,episode,probe_steps_used,probe_energy\n";
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.probe_steps.size(); ++k)
      e << fmt(r.level) << ',' << k << ',' << fmt(r.probe_steps[k]) << ',' << fmt(r.probe_energy[k]) << '\n';
  for (const auto& r : rows) log << "difficulty: level " << r.level << " mean steps " << r.mean_steps << '\n';
}

std::vector<std::pair<std::string, std::string>> input_digests(const ExperimentConfig& cfg, const std::string& command,
                                                               const Options& o) {
  std::vector<std::pair<std::string, std::string>> in;
  auto add = [&](const std::string& p) {
    if (!p.empty() && fs::is_regular_file(p)) in.emplace_back(p, sha256_file(p));
  };
  if (command == "train") add(cfg.dataset);
  if (command == "eval" || command == "rollout" || command == "trace" || command == "difficulty" ||
      command == "compare")
    add(cfg.eval.checkpoint);
  if (command == "compare") add(cfg.eval.baseline_checkpoint);
  if (command == "curve") {
    const fs::path run = opt(o, "run");
    if (fs::is_directory(run / "checkpoints"))
      for (const auto& entry : fs::directory_iterator(run / "checkpoints"))
        if (entry.is_regular_file()) add(entry.path().string());
    std::sort(in.begin(), in.end());
  }
  return in;
}

}  // namespace

std::vector<Artifact> run_command(const std::string& command, const ExperimentConfig& cfg, const Options& opts,
                                  std::ostream& log) {
  static const std::map<std::string, std::set<std::string>> allowed = {
      {"gen-data", {}},
      {"train", {"policy"}},
      {"eval", {"steps", "dynamic", "perturb"}},
      {"rollout", {"steps", "dynamic", "perturb"}},
      {"compare", {"perturb"}},
      {"trace", {"steps", "dynamic", "perturb", "episode"}},
      {"curve", {"run", "steps", "dynamic"}},
      {"difficulty", {}},
  };
  const auto it = allowed.find(command);
  if (it == allowed.end()) throw std::invalid_argument("unknown command '" + command + "'");
  check_options(opts, it->second, command);
  cfg.validate();

  Outputs out(cfg.output_dir);
  const std::string config_text = cfg.to_text();
  write_text(out.dir() / "config.ini", config_text);
  Manifest m;
  m.command = command;
  m.options = opts;
  m.seed = cfg.require_seed();
  const std::string canon = canonical_config(cfg);
  m.config_sha256 = sha256_hex(std::vector<std::uint8_t>(canon.begin(), canon.end()));
  m.inputs = input_digests(cfg, command, opts);

  try {
    if (command == "gen-data") cmd_gen_data(cfg, out, log);
    else if (command == "train") cmd_train(cfg, opts, out, log);
    else if (command == "eval") cmd_eval(cfg, opts, out, log);
    else if (command == "rollout") cmd_rollout(cfg, opts, out, log);
    else if (command == "compare") cmd_compare(cfg, opts, out, log);
    else if (command == "trace") cmd_trace(cfg, opts, out, log);
    else if (command == "curve") cmd_curve(cfg, opts, out, log);
    else cmd_difficulty(cfg, out, log);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw RunError(command + ": " + e.what());
  }

  for (const auto& a : out.artifacts)
    m.artifacts.emplace_back(a.path, a.deterministic ? sha256_file(out.dir() / a.path) : std::string("volatile"));
  write_manifest(out.dir() / "manifest.txt", m);
  return out.artifacts;
}

std::vector<std::string> replay(const fs::path& manifest, const fs::path& out, std::ostream& log) {
  const Manifest m = read_manifest(manifest);
  ExperimentConfig cfg = load_config(manifest.parent_path() / "config.ini");
  const std::string canon = canonical_config(cfg);
  if (sha256_hex(std::vector<std::uint8_t>(canon.begin(), canon.end())) != m.config_sha256)
    throw std::invalid_argument("config.ini does not match the manifest's config hash");
  for (const auto& [p, d] : m.inputs) {
    if (!fs::exists(p)) throw std::invalid_argument("replay input missing: " + p);
    if (sha256_file(p) != d) throw std::invalid_argument("replay input changed since the run: " + p);
  }
  if (fs::weakly_canonical(out) == fs::weakly_canonical(manifest.parent_path()))
    throw std::invalid_argument("replay output directory must differ from the original run");
  cfg.output_dir = out;
  run_command(m.command, cfg, m.options, log);

  std::vector<std::string> mismatches;
  for (const auto& [p, d] : m.artifacts) {
    if (d == "volatile") continue;
    const fs::path again = out / p;
    if (!fs::exists(again) || sha256_file(again) != d) mismatches.push_back(p);
  }
  return mismatches;
}

}  // namespace ebt::harness
