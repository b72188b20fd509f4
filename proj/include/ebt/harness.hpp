// ebt/harness.hpp
//
// Experiment orchestration behind the ebt_lab CLI: data generation, training
// with checkpoint series, paired evaluation, success curves, the
// steps-vs-difficulty sweep, and run manifests.
//
// Randomness: everything derives from the experiment seed through named
// sub-streams: "data" (demonstrations), "init"/"train" (per policy kind),
// "eval" (episode seeds) and "perturb" (displacements). Episode k uses the
// same seed and perturbation direction for every policy and condition, so
// comparisons are paired.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebt/config.hpp"
#include "ebt/diffusion.hpp"
#include "ebt/envs.hpp"
#include "ebt/inference.hpp"
#include "ebt/stats.hpp"

namespace ebt::harness {

namespace fs = std::filesystem;

enum class PolicyKind { ebt, ddpm };
std::string to_string(PolicyKind k);
PolicyKind policy_kind_from_string(const std::string& s);

// Runtime failure inside a command (as opposed to a validation error).
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Data and checkpoints

std::uint64_t data_seed(const ExperimentConfig& cfg);
// Loads cfg.dataset when set, otherwise generates from the data stream.
envs::Dataset make_dataset(const ExperimentConfig& cfg);
train::TrainingSet training_set(const envs::Dataset& d);

// Checkpoint extras written by train: extra/norm_min, extra/norm_max, extra/epoch.
std::vector<model::NamedTensor> checkpoint_extras(const envs::NormStats& norm, int epoch);

struct LoadedPolicy {
  PolicyKind kind = PolicyKind::ebt;
  model::EnergyModel model;
  envs::NormStats norm;
  int epoch = 0;
};
LoadedPolicy load_policy(const fs::path& checkpoint);

// steps = 0 selects dynamic inference (EBT only).
std::unique_ptr<envs::Policy> make_policy(const LoadedPolicy& p, const ExperimentConfig& cfg, int steps);

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  train::TrainReport report;
  std::size_t parameter_count = 0;
  std::vector<fs::path> checkpoints;  // epoch_0000 first, final last
};

// Writes <out>/checkpoints/epoch_NNNN.ckpt for epoch 0, every checkpoint_every
// epochs and the last epoch; <out>/<kind>.ckpt is the final model.
TrainResult train_policy(const ExperimentConfig& cfg, PolicyKind kind, const envs::Dataset& data,
                         const fs::path& out,
                         const std::function<void(const train::EpochReport&)>& progress = {});

// ---------------------------------------------------------------------------
// Evaluation

struct EpisodePlan {
  std::uint64_t seed = 0;
  std::optional<envs::Perturbation> perturbation;
};

// Episodes 0..n-1 for one perturbation level. Level 0 means unperturbed.
std::vector<EpisodePlan> episode_plan(const ExperimentConfig& cfg, double level, std::size_t episodes);

using PolicyFactory = std::function<std::unique_ptr<envs::Policy>()>;

struct EpisodeBatch {
  std::vector<envs::EpisodeRecord> records;  // plan order
  double seconds = 0.0;                      // wall-clock spent inside act()
  std::size_t inferences = 0;
};

// Runs the plan, optionally on several threads (one policy instance each).
// Records come back in plan order whatever the thread count.
EpisodeBatch run_episodes(const PolicyFactory& factory, const envs::Env& env, const std::vector<EpisodePlan>& plan,
                          std::size_t threads);

// Fork endings that are neither goal: the agent stalled between the goals.
bool midpoint_ending(const envs::EpisodeRecord& rec);

struct ConditionSummary {
  std::string policy;
  int steps = 0;  // 0 = dynamic
  double perturb = 0.0;
  std::size_t episodes = 0, successes = 0;
  stats::Interval ci;
  double mean_steps = 0.0, median_steps = 0.0;
  std::optional<double> mean_final_energy;  // EBT only
  std::size_t left = 0, right = 0, midpoint = 0;
  double seconds_per_inference = 0.0;
  std::string note;

  double rate() const { return episodes ? static_cast<double>(successes) / static_cast<double>(episodes) : 0.0; }
};

ConditionSummary summarize(const std::string& policy, int steps, double perturb, const EpisodeBatch& batch);

// policy,steps,perturb,episodes,successes,rate,ci_low,ci_high,mean_steps_used,
// median_steps_used,mean_final_energy,left,right,midpoint,note
void write_summary_header(std::ostream& os);
void write_summary_row(std::ostream& os, const ConditionSummary& s);
// policy,steps,perturb,seconds_per_inference
void write_timing_header(std::ostream& os);
void write_timing_row(std::ostream& os, const ConditionSummary& s);

// One condition end to end.
ConditionSummary evaluate(const LoadedPolicy& p, const ExperimentConfig& cfg, int steps, double perturb,
                          std::size_t episodes, EpisodeBatch* batch_out = nullptr);

// Re-plan whose state is the first one after the perturbation (for level 0,
// the re-plan at the same time index). Null when the episode ended earlier.
const envs::Replan* probe_replan(const envs::EpisodeRecord& rec, int perturb_step);

struct DifficultyRow {
  double level = 0.0;
  std::size_t episodes = 0, recovered = 0;
  stats::Interval ci;
  double mean_steps = 0.0, median_steps = 0.0, mean_energy = 0.0;
  std::optional<double> p_energy_greater;  // vs the first level
  bool cutoff_disabled = false;
  std::vector<double> probe_steps, probe_energy;
};

// Dynamic EBT inference over cfg.eval.perturb_levels.
std::vector<DifficultyRow> steps_vs_difficulty(const LoadedPolicy& p, const ExperimentConfig& cfg,
                                               std::size_t episodes);
// level,episodes,recovered,recovery_rate,ci_low,ci_high,mean_steps_used,
// median_steps_used,mean_final_energy,p_energy_greater,cutoff
void write_difficulty_csv(std::ostream& os, const std::vector<DifficultyRow>& rows);

struct CurvePoint {
  int epoch = 0;
  std::optional<ConditionSummary> summary;  // empty when the checkpoint is missing
  std::string note;
};

// checkpoints/epoch_NNNN.ckpt under `dir`; `epochs` empty means all present.
std::vector<CurvePoint> success_curve(const fs::path& dir, const std::vector<int>& epochs,
                                      const ExperimentConfig& cfg, int steps, std::size_t episodes);
// epoch,episodes,successes,rate,ci_low,ci_high,note
void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& points);
fs::path checkpoint_path(const fs::path& dir, int epoch);

// ---------------------------------------------------------------------------
// Commands and manifests

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const fs::path& path);

// Command-specific options (policy=ebt, steps=2, ...), recorded verbatim in
// the manifest so a replay runs the same command.
using Options = std::map<std::string, std::string>;

struct Artifact {
  std::string path;          // relative to the output directory
  bool deterministic = true; // timing sidecars are not
};

// Runs one command into cfg.output_dir and writes its manifest there.
// Throws std::invalid_argument / ConfigError on bad input, RunError otherwise.
std::vector<Artifact> run_command(const std::string& command, const ExperimentConfig& cfg, const Options& opts,
                                  std::ostream& log);

struct Manifest {
  std::string command;
  Options options;
  std::uint64_t seed = 0;
  std::string config_sha256;
  std::vector<std::pair<std::string, std::string>> inputs;     // path, digest
  std::vector<std::pair<std::string, std::string>> artifacts;  // path, digest ("volatile" for timing)
};

void write_manifest(const fs::path& path, const Manifest& m);
Manifest read_manifest(const fs::path& path);

// Re-runs a manifest's command with its recorded config into `out` and
// compares every deterministic artifact. Returns the mismatching paths.
std::vector<std::string> replay(const fs::path& manifest, const fs::path& out, std::ostream& log);

}  // namespace ebt::harness
