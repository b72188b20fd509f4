// ebt_lab: command-line front end for the experiment harness.
//
// Exit status: 0 success, 1 validation error (bad flag, bad config, missing
// input), 2 runtime failure.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ebt/harness.hpp"

using namespace ebt;
using harness::ExperimentConfig;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::string env;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> threads;
  std::string checkpoint;
};

struct Specific {
  std::string policy = "ebt";
  std::optional<int> steps;
  bool dynamic = false;
  std::optional<double> perturb;
  std::optional<int> episode;
  std::optional<int> epochs;
  std::string baseline;
  std::string run;
  std::string manifest;
};

void add_common(CLI::App* sub, Common& c, bool episodes_are_demos) {
  sub->add_option("--config", c.config, "experiment config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "experiment seed");
  sub->add_option("--out", c.out, "output directory (overrides EBT_OUTPUT_DIR and the config)");
  sub->add_option("--set", c.sets, "override a config key: section.key=value (repeatable)");
  sub->add_option("--env", c.env, "fork or hang");
  sub->add_option("--episodes", c.episodes,
                  episodes_are_demos ? "number of demonstrations" : "evaluation episodes per condition");
  sub->add_option("--threads", c.threads, "evaluation threads");
}

ExperimentConfig build_config(const Common& c, bool episodes_are_demos) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : harness::load_config(c.config);
  if (const char* dir = std::getenv("EBT_OUTPUT_DIR"); dir && *dir) cfg.output_dir = dir;
  for (const auto& s : c.sets) harness::apply_override(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.env.empty()) cfg.env = envs::env_from_string(c.env);
  if (c.episodes) (episodes_are_demos ? cfg.demos : cfg.eval.episodes) = *c.episodes;
  if (c.threads) cfg.eval.threads = *c.threads;
  if (!c.checkpoint.empty()) cfg.eval.checkpoint = c.checkpoint;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ebt_lab: energy-based policy experiments on desk-scale tasks"};
  app.require_subcommand(1);
  Common common;
  Specific sp;

  auto* gen = app.add_subcommand("gen-data", "generate expert demonstrations");
  add_common(gen, common, true);

  auto* train = app.add_subcommand("train", "train a policy, writing a checkpoint series");
  add_common(train, common, true);
  train->add_option("--policy", sp.policy, "ebt or ddpm")->check(CLI::IsMember({"ebt", "ddpm"}));
  train->add_option("--epochs", sp.epochs, "training epochs");

  auto* eval = app.add_subcommand("eval", "success rate of one checkpoint at one setting");
  add_common(eval, common, false);
  eval->add_option("--checkpoint", common.checkpoint, "checkpoint to evaluate");
  auto* eval_steps = eval->add_option("--steps", sp.steps, "fixed inference steps");
  eval->add_flag("--dynamic", sp.dynamic, "dynamic (gradient cutoff) inference")->excludes(eval_steps);
  eval->add_option("--perturb", sp.perturb, "perturbation level");

  auto* rollout = app.add_subcommand("rollout", "perturbed rollouts (recovery rates)");
  add_common(rollout, common, false);
  rollout->add_option("--checkpoint", common.checkpoint, "checkpoint to evaluate");
  auto* ro_steps = rollout->add_option("--steps", sp.steps, "fixed inference steps");
  rollout->add_flag("--dynamic", sp.dynamic, "dynamic inference")->excludes(ro_steps);
  rollout->add_option("--perturb", sp.perturb, "perturbation level (default: the config grid)");

  auto* compare = app.add_subcommand("compare", "paired comparison of an EBT and a DDPM checkpoint");
  add_common(compare, common, false);
  compare->add_option("--checkpoint", common.checkpoint, "EBT checkpoint");
  compare->add_option("--baseline", sp.baseline, "DDPM checkpoint");
  compare->add_option("--perturb", sp.perturb, "perturbation level");

  auto* trace = app.add_subcommand("trace", "energy timeline and trajectory of one episode");
  add_common(trace, common, false);
  trace->add_option("--checkpoint", common.checkpoint, "checkpoint");
  auto* tr_steps = trace->add_option("--steps", sp.steps, "fixed inference steps");
  trace->add_flag("--dynamic", sp.dynamic, "dynamic inference")->excludes(tr_steps);
  trace->add_option("--perturb", sp.perturb, "perturbation level");
  trace->add_option("--episode", sp.episode, "episode index");

  auto* curve = app.add_subcommand("curve", "success rate over a training run's checkpoints");
  add_common(curve, common, false);
  curve->add_option("--run", sp.run, "training output directory")->required();
  auto* cu_steps = curve->add_option("--steps", sp.steps, "fixed inference steps");
  curve->add_flag("--dynamic", sp.dynamic, "dynamic inference")->excludes(cu_steps);

  auto* diff = app.add_subcommand("difficulty", "dynamic steps used versus perturbation level");
  diff->alias("steps-vs-difficulty");
  add_common(diff, common, false);
  diff->add_option("--checkpoint", common.checkpoint, "EBT checkpoint");

  auto* rep = app.add_subcommand("replay", "re-run a manifest and compare artifact digests");
  rep->add_option("manifest", sp.manifest, "manifest.txt of a previous run")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", common.out, "output directory for the re-run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    if (name == "replay") {
      const auto bad = harness::replay(sp.manifest, common.out, std::cerr);
      for (const auto& p : bad) std::cout << "MISMATCH " << p << '\n';
      std::cout << (bad.empty() ? "replay: all artifacts identical\n" : "replay: artifacts differ\n");
      return bad.empty() ? 0 : 2;
    }
    const bool demos = name == "gen-data" || name == "train";
    ExperimentConfig cfg = build_config(common, demos);
    harness::Options opts;
    if (name == "train") {
      opts["policy"] = sp.policy;
      if (sp.epochs) cfg.train.epochs = *sp.epochs;
    }
    if (name == "compare" && !sp.baseline.empty()) cfg.eval.baseline_checkpoint = sp.baseline;
    if (sp.steps) opts["steps"] = std::to_string(*sp.steps);
    if (sp.dynamic) opts["dynamic"] = "1";
    if (sp.perturb) opts["perturb"] = harness::format_double(*sp.perturb);
    if (sp.episode) opts["episode"] = std::to_string(*sp.episode);
    if (!sp.run.empty()) opts["run"] = sp.run;
    const std::string command = name == "steps-vs-difficulty" ? "difficulty" : name;
    const auto artifacts = harness::run_command(command, cfg, opts, std::cerr);
    std::cout << "wrote " << artifacts.size() << " artifacts and manifest.txt to " << cfg.output_dir.string() << '\n';
    return 0;
  } catch (const harness::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
}
