// tests/acceptance.cpp
//
// Acceptance run: prints one PASS/FAIL line per criterion, followed by the
// measurements behind it. Trains the fork and hang policies from configs/,
// which takes roughly 20 minutes on one core.
//
//   acceptance [work_dir]
//
// Exit status is 0 only when every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ebt/harness.hpp"
#include "grad_cases.hpp"

using namespace ebt;
using namespace ebt::harness;
namespace fs = std::filesystem;
using ad::Tensor;

#ifndef EBT_CONFIG_DIR
#define EBT_CONFIG_DIR "configs"
#endif

namespace {

std::string strf(const char* fmt, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  int id;
  std::string title;
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok    " : "MISS  ") + what);
  }
  void note(const std::string& what) { details.push_back("      " + what); }
};

std::vector<Verdict> verdicts;

void report(const Verdict& v, double seconds) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << v.id << ": " << v.title
            << strf(" (%.0f s)", seconds) << '\n';
  for (const auto& d : v.details) std::cout << "    " << d << '\n';
  std::cout.flush();
  verdicts.push_back(v);
}

template <class F>
void run(int id, const std::string& title, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v{id, title};
  try {
    body(v);
  } catch (const std::exception& e) {
    v.check(false, std::string("threw: ") + e.what());
  }
  report(v, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

double pct(double r) { return 100.0 * r; }

std::string rate_text(const ConditionSummary& s) {
  return strf("%zu/%zu = %.1f%% [%.1f, %.1f]", s.successes, s.episodes, pct(s.rate()), pct(s.ci.low),
              pct(s.ci.high));
}

// ---------------------------------------------------------------------------
// Gradient checks on whole models

model::Architecture small_arch(model::Backbone b) {
  model::Architecture a;
  a.backbone = b;
  a.obs_dim = 4;
  a.history = 2;
  a.horizon = 4;
  a.action_dim = 2;
  a.embed_dim = 8;
  a.encoder_hidden = 8;
  a.mlp_width = 16;
  a.mlp_depth = 2;
  a.tf_width = 8;
  a.tf_blocks = 1;
  a.tf_heads = 2;
  a.context_tokens = 2;
  a.head_init_scale = 1.0;
  return a;
}

// ||analytic - central|| / max(||analytic||, ||central||, floor) over one
// parameter tensor, perturbing it in place.
double param_error(const model::EnergyModel& m, const std::string& name,
                   const std::function<Tensor(const model::EnergyModel&)>& f, double floor, double eps = 1e-6) {
  Tensor p = m.param(name);
  const Tensor analytic = ad::grad(f(m), {p})[0];
  auto data = p.mutable_data();
  double diff = 0.0, na = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + eps;
    const double fp = f(m).item();
    data[i] = keep - eps;
    const double fm = f(m).item();
    data[i] = keep;
    const double central = (fp - fm) / (2 * eps);
    diff += (analytic[i] - central) * (analytic[i] - central);
    na += analytic[i] * analytic[i];
    nc += central * central;
  }
  const double scale = std::max(std::sqrt(std::max(na, nc)), floor);
  return scale > 0 ? std::sqrt(diff) / scale : 0.0;
}

// Worst error over every parameter tensor of the model. Some gradients vanish
// identically (a key bias shifts every attention score of a query equally);
// there the central difference is rounding noise, so tensor norms are floored
// at 1e-3 of the whole gradient's norm.
double model_error(const model::EnergyModel& m, const std::function<Tensor(const model::EnergyModel&)>& f,
                   std::string& worst_name) {
  std::vector<Tensor> params;
  for (const auto& p : m.parameters()) params.push_back(m.param(p.name));
  double total = 0.0;
  for (const auto& g : ad::grad(f(m), params).values)
    for (double v : g.data()) total += v * v;
  const double floor = 1e-3 * std::sqrt(total);

  double worst = 0.0;
  for (const auto& p : m.parameters()) {
    const double e = param_error(m, p.name, f, floor);
    if (e > worst) {
      worst = e;
      worst_name = p.name;
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Configs and runs

ExperimentConfig task_config(const std::string& file, const fs::path& out) {
  ExperimentConfig c = load_config(fs::path(EBT_CONFIG_DIR) / file);
  c.output_dir = out;
  c.eval.threads = 1;
  return c;
}

struct TaskRun {
  ExperimentConfig cfg;
  fs::path dir;
  TrainResult ebt, ddpm;
  LoadedPolicy ebt_final, ddpm_final;
};

TaskRun train_task(const std::string& file, const fs::path& dir) {
  const ExperimentConfig cfg = task_config(file, dir);
  fs::remove_all(dir);
  const auto data = make_dataset(cfg);
  auto progress = [](const train::EpochReport& r) {
    if (r.epoch % 50 == 0) std::cerr << strf("  epoch %d loss %.5f\n", r.epoch, r.loss);
  };
  std::cerr << "training ebt (" << file << ")\n";
  auto ebt = train_policy(cfg, PolicyKind::ebt, data, dir / "ebt", progress);
  std::cerr << "training ddpm (" << file << ")\n";
  auto ddpm = train_policy(cfg, PolicyKind::ddpm, data, dir / "ddpm", progress);
  return TaskRun{cfg, dir, std::move(ebt), std::move(ddpm), load_policy(dir / "ebt" / "ebt.ckpt"),
                 load_policy(dir / "ddpm" / "ddpm.ckpt")};
}

std::vector<int> epochs_upto(int last, int every) {
  std::vector<int> e;
  for (int k = every; k <= last; k += every) e.push_back(k);
  return e;
}

void save_curve(const fs::path& p, const std::vector<CurvePoint>& pts) {
  std::ofstream os(p);
  write_curve_csv(os, pts);
}

std::string curve_text(const std::vector<CurvePoint>& pts) {
  std::string s;
  for (const auto& p : pts)
    if (p.summary) s += strf("%d:%.0f ", p.epoch, pct(p.summary->rate()));
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  fs::create_directories(work);
  std::cout << "acceptance run in " << fs::absolute(work).string() << "\n\n";

  // 1. Langevin noise schedule endpoints and midpoint.
  run(1, "noise schedule exactness", [](Verdict& v) {
    const sampler::SamplerConfig cfg;
    for (int T : {2, 10, 100, 1000}) {
      const double s0 = sampler::anneal_sigma(0, T, cfg), sT = sampler::anneal_sigma(T, T, cfg),
                   sm = sampler::anneal_sigma(T / 2, T, cfg);
      v.check(std::abs(s0 - 0.2) <= 1e-12 && std::abs(sT - 0.002) <= 1e-12 && std::abs(sm - 0.101) <= 1e-12,
              strf("T=%d: sigma(0)=%.17g sigma(T)=%.17g sigma(T/2)=%.17g", T, s0, sT, sm));
    }
  });

  // 2. Finite-difference checks: primitives, both backbones, and the
  // second-order (training-path) derivative.
  run(2, "gradient correctness", [](Verdict& v) {
    Rng rng(12345);
    double worst = 0.0;
    std::string worst_name;
    const auto cases = testing::primitive_cases();
    for (const auto& c : cases) {
      const double e = testing::primitive_error(c, rng, 50);
      if (e >= worst) worst = e, worst_name = c.name;
    }
    v.check(worst < 1e-5, strf("%zu primitives, worst rel. error %.2e (%s)", cases.size(), worst, worst_name.c_str()));

    for (auto b : {model::Backbone::mlp, model::Backbone::transformer}) {
      const auto a = small_arch(b);
      Rng r(21);
      const model::EnergyModel m(a, r);
      const Tensor w = testing::random_tensor({2, a.window_size()}, r);
      const Tensor y = testing::random_tensor({2, a.action_size()}, r);
      const Tensor z = m.encode(w).detach();
      const double ey = ad::check_grad([&](const Tensor& yy) { return ad::sum(m.energy(z, yy)); }, y, 1e-5);
      const double ez = ad::check_grad([&](const Tensor& zz) { return ad::sum(m.energy(zz, y)); }, z, 1e-5);
      std::string name;
      const double ep =
          model_error(m, [&](const model::EnergyModel& mm) { return ad::sum(mm.energy(mm.encode(w), y)); }, name);
      v.check(std::max({ey, ez, ep}) < 1e-5,
              strf("%s backbone (%zu params): dE/dy %.2e, dE/dz %.2e, dE/dtheta %.2e (worst %s)",
                   model::to_string(b).c_str(), m.parameter_count(), ey, ez, ep, name.c_str()));
    }

    // d/dtheta <v, dE/dy>, the derivative training takes through the chain.
    auto tiny = small_arch(model::Backbone::mlp);
    tiny.obs_dim = 2;
    tiny.horizon = 2;
    tiny.embed_dim = 4;
    tiny.mlp_width = 12;
    Rng r(5);
    const model::EnergyModel m(tiny, r);
    const Tensor w = testing::random_tensor({2, tiny.window_size()}, r);
    const Tensor y = testing::random_tensor({2, tiny.action_size()}, r);
    const Tensor dir = testing::random_tensor({2, tiny.action_size()}, r);
    std::string name;
    const double e2 = model_error(
        m,
        [&](const model::EnergyModel& mm) {
          const auto eg = model::energy_grad(mm, mm.encode(w), y, true);
          return ad::sum(ad::mul(dir, eg.grad));
        },
        name);
    v.check(m.parameter_count() <= 1000 && e2 < 1e-4,
            strf("mixed second order on %zu params: rel. error %.2e (worst %s)", m.parameter_count(), e2,
                 name.c_str()));
  });

  // 3. Dynamic inference on E = 1/2 ||y - mu||^2 with unit-RMS mu.
  run(3, "analytic stub convergence", [](Verdict& v) {
    std::vector<double> mu(16);
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = (i % 3 == 1) ? -1.0 : 1.0;
    const model::QuadraticEnergy stub(mu, 1);
    sampler::SamplerConfig cfg;
    cfg.eta_base = 0.75;  // step 0.5 after the 1/c scale
    cfg.energy_clamp = 0.0;
    cfg.tau = 1e-3;
    int max_steps = 0, cut = 0;
    double worst_dist = 0.0;
    bool monotone = true;
    const int seeds = 50;
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(static_cast<std::uint64_t>(seed));
      const auto res = inference::infer(stub, {1, 1, {0.0}}, nullptr, cfg, rng);
      max_steps = std::max(max_steps, res.steps_used);
      cut += res.trace.terminated_by == sampler::Termination::grad_cutoff;
      double d = 0.0;
      for (std::size_t i = 0; i < mu.size(); ++i) d += std::pow(res.trajectory.actions[i] - mu[i], 2);
      worst_dist = std::max(worst_dist, std::sqrt(d));
      for (std::size_t i = 1; i < res.trace.steps.size(); ++i)
        monotone = monotone && res.trace.steps[i].energy < res.trace.steps[i - 1].energy;
    }
    v.check(cut == seeds && max_steps < 20, strf("%d/%d chains stopped by the cutoff, at most %d steps", cut, seeds,
                                                 max_steps));
    v.check(worst_dist < 1e-3, strf("worst ||y - mu|| = %.2e", worst_dist));
    v.check(monotone, "energy strictly decreasing along every trace");
  });

  std::cerr << "fork task\n";
  const TaskRun fork = train_task("fork.ini", work / "fork");

  // 4. Epochs-to-success on fork: EBT at 2 steps vs DDPM at 10..100 steps.
  run(4, "training efficiency on fork (EBT 2 steps vs DDPM)", [&](Verdict& v) {
    const auto& cfg = fork.cfg;
    const std::size_t n = cfg.eval.episodes;
    const int every = cfg.train.checkpoint_every;
    const auto early = epochs_upto(50, every);
    const auto all = epochs_upto(cfg.train.epochs, every);

    const auto ebt2 = success_curve(fork.dir / "ebt", early, cfg, 2, n);
    save_curve(work / "fork_curve_ebt_2.csv", ebt2);
    int first = -1;
    double low = 0.0;
    for (const auto& p : ebt2)
      if (first < 0 && p.summary && p.summary->rate() >= 0.9 && p.summary->ci.low >= 0.85)
        first = p.epoch, low = p.summary->ci.low;
    v.note("EBT@2 by epoch (%): " + curve_text(ebt2));
    v.check(first > 0, first > 0 ? strf("EBT@2 >= 90%% with Wilson low %.3f at epoch %d (<= 50)", low, first)
                                 : std::string("EBT@2 never reaches 90% with Wilson low >= 85% by epoch 50"));

    double ddpm10_early = 0.0, below50_best = 0.0, above50_best = 0.0;
    int below50_epoch = 0, below50_steps = 0;
    for (int steps : {10, 20, 50, 100}) {
      const auto c = success_curve(fork.dir / "ddpm", all, cfg, steps, n);
      save_curve(work / strf("fork_curve_ddpm_%d.csv", steps), c);
      v.note(strf("DDPM@%d by epoch (%%): ", steps) + curve_text(c));
      for (const auto& p : c) {
        const double r = p.summary->rate();
        if (steps == 10 && p.epoch <= 50) ddpm10_early = std::max(ddpm10_early, r);
        if (steps < 50 && r > below50_best) below50_best = r, below50_epoch = p.epoch, below50_steps = steps;
        if (steps >= 50) above50_best = std::max(above50_best, r);
      }
    }
    v.check(ddpm10_early < 0.5, strf("DDPM@10 best through epoch 50: %.0f%% (< 50%%)", pct(ddpm10_early)));
    v.check(below50_best <= 0.9, strf("DDPM below 50 steps best: %.0f%% (DDPM@%d, epoch %d; must stay <= 90%%)",
                                      pct(below50_best), below50_steps, below50_epoch));
    v.check(above50_best > 0.9, strf("DDPM at 50 or 100 steps best: %.0f%% (> 90%%)", pct(above50_best)));
  });

  // 6. Adaptive compute: steps and energies at the first re-plan after the
  // perturbation, level 0.3 vs unperturbed.
  run(6, "adaptive compute on fork (dynamic inference)", [&](Verdict& v) {
    ExperimentConfig cfg = fork.cfg;
    cfg.eval.perturb_levels = {0.0, 0.3};
    const auto rows = steps_vs_difficulty(fork.ebt_final, cfg, 200);
    std::ofstream os(work / "fork_difficulty.csv");
    write_difficulty_csv(os, rows);
    const auto& a = rows[0];
    const auto& b = rows[1];
    v.note(strf("tau %g; probes %zu / %zu", cfg.sampler.tau, a.probe_steps.size(), b.probe_steps.size()));
    v.check(b.mean_steps >= 1.25 * a.mean_steps,
            strf("mean steps_used %.2f at level 0 vs %.2f at 0.3 (%+.0f%%, need >= +25%%)", a.mean_steps,
                 b.mean_steps, 100.0 * (b.mean_steps / a.mean_steps - 1.0)));
    v.check(b.p_energy_greater && *b.p_energy_greater < 0.05,
            strf("final energy %.4f vs %.4f, one-sided rank test p = %.2e", a.mean_energy, b.mean_energy,
                 b.p_energy_greater.value_or(1.0)));
  });

  // 7. Mode occupancy of the final fork policy.
  run(7, "multimodality on fork (EBT 2 steps, 200 rollouts)", [&](Verdict& v) {
    const auto s = evaluate(fork.ebt_final, fork.cfg, 2, 0.0, 200);
    const double n = static_cast<double>(s.episodes);
    v.check(s.rate() >= 0.9, "at a goal: " + rate_text(s));
    v.check(s.left / n >= 0.2 && s.right / n >= 0.2,
            strf("left %zu (%.1f%%), right %zu (%.1f%%), each must be >= 20%%", s.left, pct(s.left / n), s.right,
                 pct(s.right / n)));
    v.check(s.midpoint / n <= 0.05, strf("midpoint endings %zu (%.1f%%, <= 5%%)", s.midpoint, pct(s.midpoint / n)));
    const auto d = evaluate(fork.ddpm_final, fork.cfg, 100, 0.0, 200);
    v.note(strf("for reference, DDPM@100: %s, left %zu, right %zu, midpoint %zu", rate_text(d).c_str(), d.left,
                d.right, d.midpoint));
  });

  // 9. Training stability of the 200-epoch fork run.
  run(9, "training stability (200 epochs on fork)", [&](Verdict& v) {
    const auto& ep = fork.ebt.report.epochs;
    std::size_t skipped = 0, nonfinite = 0, bad_loss = 0;
    double max_norm = 0.0;
    for (const auto& e : ep) {
      skipped += e.skipped;
      nonfinite += e.nonfinite_updates;
      bad_loss += !std::isfinite(e.loss);
      max_norm = std::max(max_norm, e.max_clipped_norm);
    }
    v.check(ep.size() == 200, strf("%zu epochs", ep.size()));
    v.check(skipped == 0 && nonfinite == 0 && bad_loss == 0,
            strf("non-finite batches %zu, non-finite updates %zu, non-finite epoch losses %zu", skipped, nonfinite,
                 bad_loss));
    v.check(max_norm <= 1.0 + 1e-9, strf("largest post-clip gradient norm %.12f", max_norm));
  });

  std::cerr << "hang task\n";
  const TaskRun hang = train_task("hang.ini", work / "hang");

  // 5. Step-count sensitivity on hang.
  run(5, "step-count sensitivity on hang", [&](Verdict& v) {
    const std::size_t n = hang.cfg.eval.episodes;
    const auto d10 = evaluate(hang.ddpm_final, hang.cfg, 10, 0.0, n);
    const auto d100 = evaluate(hang.ddpm_final, hang.cfg, 100, 0.0, n);
    const auto e2 = evaluate(hang.ebt_final, hang.cfg, 2, 0.0, n);
    const auto e20 = evaluate(hang.ebt_final, hang.cfg, 20, 0.0, n);
    v.note("DDPM@10  " + rate_text(d10));
    v.note("DDPM@100 " + rate_text(d100));
    v.note("EBT@2    " + rate_text(e2));
    v.note("EBT@20   " + rate_text(e20));
    v.check(d100.rate() - d10.rate() >= 0.2,
            strf("DDPM@100 - DDPM@10 = %.1f points (>= 20)", pct(d100.rate() - d10.rate())));
    v.check(std::abs(e2.rate() - e20.rate()) <= 0.05,
            strf("|EBT@2 - EBT@20| = %.1f points (<= 5)", pct(std::abs(e2.rate() - e20.rate()))));
  });

  // 8. Recovery after a 0.2 displacement on hang, paired episodes.
  run(8, "recovery on hang at perturbation 0.2", [&](Verdict& v) {
    const auto e = evaluate(hang.ebt_final, hang.cfg, 2, 0.2, 200);
    const auto d10 = evaluate(hang.ddpm_final, hang.cfg, 10, 0.2, 200);
    const auto d100 = evaluate(hang.ddpm_final, hang.cfg, 100, 0.2, 200);
    v.note("EBT@2    " + rate_text(e));
    v.note("DDPM@10  " + rate_text(d10));
    v.note("DDPM@100 " + rate_text(d100));
    const double best = std::max(d10.rate(), d100.rate());
    v.check(e.rate() - best >= 0.15,
            strf("EBT minus the better DDPM setting: %.1f points (>= 15)", pct(e.rate() - best)));
  });

  // 10. Every command re-run from its manifest reproduces its artifacts.
  run(10, "manifest replay is byte-identical", [&](Verdict& v) {
    const fs::path root = work / "replay";
    fs::remove_all(root);
    ExperimentConfig c = task_config("fork.ini", root / "gen");
    c.demos = 40;
    c.train.epochs = 3;
    c.train.checkpoint_every = 1;
    c.model.mlp_width = 32;
    c.eval.episodes = 8;
    c.eval.steps = {2, 10};
    c.eval.perturb_levels = {0.0, 0.3};
    std::ostringstream log;
    std::vector<fs::path> runs;
    auto go = [&](const std::string& name, const std::string& command, const Options& o) {
      c.output_dir = root / name;
      run_command(command, c, o, log);
      runs.push_back(c.output_dir);
    };
    go("gen", "gen-data", {});
    c.dataset = (root / "gen" / "dataset.bin").string();
    go("train_ebt", "train", {{"policy", "ebt"}});
    go("train_ddpm", "train", {{"policy", "ddpm"}});
    c.eval.checkpoint = (root / "train_ebt" / "ebt.ckpt").string();
    c.eval.baseline_checkpoint = (root / "train_ddpm" / "ddpm.ckpt").string();
    go("eval", "eval", {{"steps", "2"}});
    go("rollout", "rollout", {{"steps", "2"}, {"perturb", "0.3"}});
    go("compare", "compare", {{"perturb", "0.2"}});
    go("trace", "trace", {{"dynamic", "1"}, {"episode", "1"}});
    go("curve", "curve", {{"run", (root / "train_ddpm").string()}, {"steps", "10"}});
    go("difficulty", "difficulty", {});
    std::size_t compared = 0;
    for (const auto& r : runs) {
      const auto m = read_manifest(r / "manifest.txt");
      for (const auto& [path, digest] : m.artifacts) compared += digest != "volatile";
      const auto bad = replay(r / "manifest.txt", root / (r.filename().string() + "_replay"), log);
      std::string list;
      for (const auto& b : bad) list += " " + b;
      v.check(bad.empty(), m.command + ": " + (bad.empty() ? "identical" : "differs:" + list));
    }
    v.note(strf("%zu runs, %zu deterministic artifacts compared", runs.size(), compared));
  });

  std::size_t passed = 0;
  for (const auto& v : verdicts) passed += v.pass;
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::cout << "\nsummary: " << passed << "/" << verdicts.size() << " criteria pass\n";
  for (const auto& v : verdicts) std::cout << "  " << (v.pass ? "PASS" : "FAIL") << " " << v.id << " " << v.title << '\n';
  return passed == verdicts.size() ? 0 : 1;
}
