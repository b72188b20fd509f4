// ebt/config.hpp
//
// Experiment configuration. The file format is flat text:
//
//   # comment
//   [section]
//   key = value
//
// Lists are comma separated. Every key belongs to a section; unknown sections
// or keys, duplicates and malformed values are errors that carry the line
// number. to_text() writes every key in a canonical order, which is what run
// manifests hash.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ebt/diffusion.hpp"
#include "ebt/energy_model.hpp"
#include "ebt/envs.hpp"
#include "ebt/sampler.hpp"
#include "ebt/trainer.hpp"

namespace ebt::harness {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

struct EvalConfig {
  std::size_t episodes = 100;
  // Fixed step grid for eval/compare; EBT rows above max_infer_steps are
  // reported as skipped.
  std::vector<int> steps{1, 2, 5, 10, 20, 50, 100};
  bool dynamic = true;                       // compare also runs dynamic EBT inference
  std::vector<double> perturb_levels{0.0, 0.1, 0.2, 0.3};
  int perturb_step = 8;                      // a multiple of the execute stride
  std::size_t threads = 1;
  std::string checkpoint;                    // policy under evaluation
  std::string baseline_checkpoint;           // second policy for compare
  std::vector<int> curve_epochs;             // empty: every checkpoint found
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "runs/experiment";

  envs::EnvId env = envs::EnvId::fork;
  envs::EnvParams env_params;
  std::size_t demos = 200;
  std::string dataset;  // gen-data file; empty regenerates from the seed

  model::Architecture model;  // task fields come from the environment
  sampler::SamplerConfig sampler;
  train::TrainConfig train;
  diffusion::DiffusionConfig diffusion;
  EvalConfig eval;

  // Throws std::invalid_argument when no seed was given.
  std::uint64_t require_seed() const;
  model::Architecture architecture(model::Head head) const;
  void validate() const;

  // Sets one key from its text form; throws std::invalid_argument.
  void set(const std::string& section, const std::string& key, const std::string& value);
  std::string to_text() const;
};

ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

// "section.key=value" override, as given on the command line.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace ebt::harness
