#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerkit/bench.hpp"
#include "steerkit/policy_io.hpp"
#include "steerkit/reward.hpp"
#include "steerkit/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace steerkit;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DocumentError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DocumentError(path + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_run(const std::string& config_path, int jobs, bool plot) {
  BenchConfig cfg = load_bench_config(read_json_file(config_path));
  validate_guidance_config(cfg.guidance);

  const SuiteResult suite = run_suite(cfg, jobs);
  fs::create_directories(cfg.out_dir);
  write_text_file(fs::path(cfg.out_dir) / "episodes.csv", episodes_csv(suite));
  write_text_file(fs::path(cfg.out_dir) / "summary.csv", summary_csv(suite));

  if (plot) {
    // One plot per grid cell, nominal scene as the backdrop; per-episode
    // perturbed scenes differ, the paths still tell the story.
    std::size_t row = 0;
    for (const auto& cell : suite.summary) {
      std::vector<EpisodeResult> eps(
          suite.episodes.begin() + static_cast<std::ptrdiff_t>(row),
          suite.episodes.begin() + static_cast<std::ptrdiff_t>(row + cell.episodes));
      row += static_cast<std::size_t>(cell.episodes);
      const std::string name =
          "traj_" + cell.task + "_" + cell.perturbation + "_" + cell.variant + ".svg";
      const std::string title = cell.task + " / " + cell.perturbation + " / " + cell.variant;
      write_text_file(fs::path(cfg.out_dir) / name,
                      plot_trajectories(nominal_scene(cell.task), eps, cfg.chunk_T, title));
    }
  }

  std::printf("%-14s %-20s %-10s %8s %6s %8s\n", "task", "perturbation", "variant", "episodes",
              "sr", "se");
  for (const auto& c : suite.summary)
    std::printf("%-14s %-20s %-10s %8d %6.3f %8.4f\n", c.task.c_str(), c.perturbation.c_str(),
                c.variant.c_str(), c.episodes, c.sr(), c.se());
  std::printf("wrote %s/episodes.csv (%zu rows)\n", cfg.out_dir.c_str(), suite.rows.size());
  return 0;
}

int cmd_demo_gen(const std::string& family, int count, int T, int D, double noise,
                 std::uint64_t seed, const std::string& out_path) {
  const TaskSpec task = make_task(family);
  Rng rng(seed);
  const auto demos = generate_demos(task, count, T, D, noise, rng);

  json j;
  j["family"] = family;
  j["T"] = T;
  j["D"] = D;
  j["noise"] = noise;
  j["seed"] = seed;
  j["episodes"] = json::array();
  for (const auto& episode : demos) {
    json stages = json::array();
    for (std::size_t s = 0; s < episode.size(); ++s) {
      json rows = json::array();
      for (int t = 0; t < episode[s].T; ++t) {
        json row = json::array();
        for (int d = 0; d < episode[s].D; ++d) row.push_back(episode[s].at(t, d));
        rows.push_back(std::move(row));
      }
      stages.push_back({{"stage", s + 1}, {"actions", std::move(rows)}});
    }
    j["episodes"].push_back(std::move(stages));
  }
  write_text_file(out_path, j.dump(2) + "\n");
  std::printf("wrote %zu demos x %d stages to %s\n", demos.size(),
              stage_count_for_family(family), out_path.c_str());
  return 0;
}

int cmd_fit_policy(const std::string& family, int stage, int count, double noise, int components,
                   int iters, std::uint64_t seed, const std::string& out_path) {
  const int slots = stage_count_for_family(family);
  if (stage < 1 || stage > slots)
    throw DocumentError("stage " + std::to_string(stage) + " out of range for " + family +
                        " (1.." + std::to_string(slots) + ")");
  DemoConfig demo;
  demo.count = count;
  demo.noise = noise;
  demo.components = components;
  demo.em_iters = iters;
  demo.seed = seed;
  const PolicyBank bank = build_policy_bank({family}, 8, 3, demo);
  const json j = save_policy(bank.at(family, stage));
  write_text_file(out_path, j.dump(2) + "\n");
  std::printf("wrote %s stage %d policy (%d components) to %s\n", family.c_str(), stage,
              components, out_path.c_str());
  return 0;
}

// Fast self-diagnosis: spot checks of the numerical core against
// independent estimates. Not a substitute for the test suite.
int cmd_check() {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::printf("%-44s %s\n", name, ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  {
    Rng rng(11);
    bool ok = true;
    for (int trial = 0; trial < 5 && ok; ++trial) {
      GaussianMixturePolicy p;
      p.T = 4;
      p.D = 3;
      for (int m = 0; m < 2; ++m) {
        MixtureComponent c;
        c.weight = 0.5;
        for (int e = 0; e < p.dim(); ++e) {
          c.mean.push_back(rng.normal() * 0.05);
          c.diag_cov.push_back(0.01 + 0.01 * rng.uniform01());
        }
        p.components.push_back(std::move(c));
      }
      const NoiseSchedule sched = build_noise_schedule(16, 1e-4, 0.3);
      Rng ra(100 + static_cast<std::uint64_t>(trial));
      Rng rb(100 + static_cast<std::uint64_t>(trial));
      GuidanceConfig g;
      g.batch_size = 4;
      g.denoise_steps = 16;
      g.fk_enabled = false;
      g.rbf_enabled = false;
      g.mcmc_steps = 0;
      const RewardDims dims{p.T, p.D, 1, 2};
      const RewardProgram prog = parse_reward(
          "stage s { reward: -norm2(cum(a)[3][0:2] - p[0][0:2]); high: 0.0; low: -1.0; }", dims);
      KeypointSet kps;
      kps.labels = {"x"};
      kps.coords = {0.0, 0.0};
      const auto plain = sample_unguided(p, 4, sched, ra);
      const auto guided = guided_denoise(p, prog, 1, kps, {0.0, 0.0}, g, 0.0, rb);
      for (int i = 0; i < 4 && ok; ++i)
        for (int e = 0; e < p.dim() && ok; ++e)
          ok = plain[static_cast<std::size_t>(i)][e] ==
               guided.batch.chunks[static_cast<std::size_t>(i)][e];
    }
    report("all-off steering reduces to base sampling", ok);
  }

  {
    Rng rng(22);
    GaussianMixturePolicy p;
    p.T = 3;
    p.D = 3;
    for (int m = 0; m < 3; ++m) {
      MixtureComponent c;
      c.weight = m == 0 ? 0.5 : 0.25;
      for (int e = 0; e < p.dim(); ++e) {
        c.mean.push_back(rng.normal());
        c.diag_cov.push_back(0.2 + rng.uniform01());
      }
      p.components.push_back(std::move(c));
    }
    const NoiseSchedule sched = build_noise_schedule(12, 1e-4, 0.2);
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      ActionChunk a(p.T, p.D);
      for (int e = 0; e < a.size(); ++e) a[e] = rng.normal();
      const int k = 1 + static_cast<int>(rng.next_u64() % 12);
      const ActionChunk eps = epsilon_analytic(p, a, k, sched);
      const double ab = sched.alpha_bar_at(k);
      const double h = 1e-5;
      for (int e = 0; e < a.size() && ok; ++e) {
        ActionChunk up = a, dn = a;
        up[e] += h;
        dn[e] -= h;
        const double fd = (log_marginal_diffusion(p, up, k, sched) -
                           log_marginal_diffusion(p, dn, k, sched)) /
                          (2 * h);
        const double want = -std::sqrt(1.0 - ab) * fd;
        ok = std::abs(eps[e] - want) <= 1e-5 * std::max(1.0, std::abs(want));
      }
    }
    report("analytic epsilon matches score finite differences", ok);
  }

  {
    const RewardDims dims{6, 3, 2, 2};
    const RewardProgram prog = parse_reward(
        "stage s { reward: -norm2(cum(a)[5][0:2] - p[1][0:2]) + 0.05 * mean_t(tanh(2.0 * "
        "a[t][2])); high: 0.0; low: -1.0; }",
        dims);
    KeypointSet kps;
    kps.labels = {"a", "b"};
    kps.coords = {0.2, 0.3, 0.7, 0.8};
    Rng rng(33);
    bool ok = true;
    for (int trial = 0; trial < 10 && ok; ++trial) {
      ActionChunk a(6, 3);
      for (int e = 0; e < a.size(); ++e) a[e] = 0.2 * rng.normal();
      ok = check_grad(prog, 1, a, kps, {0.5, 0.1}) <= 1e-4;
    }
    report("reward autodiff matches finite differences", ok);
  }

  {
    const std::vector<double> w = fk_weights({0.0, std::log(2.0)});
    bool ok = std::abs(w[0] - 1.0 / 3.0) < 1e-12 && std::abs(w[1] - 2.0 / 3.0) < 1e-12;
    const std::vector<double> shifted = fk_weights({1000.0, 1000.0 + std::log(2.0)});
    ok = ok && std::abs(shifted[0] - w[0]) < 1e-12 && std::abs(shifted[1] - w[1]) < 1e-12;
    const std::vector<double> big = fk_weights({1000.0, 0.0});
    ok = ok && std::isfinite(big[0]) && std::abs(big[0] - 1.0) < 1e-12;
    report("potential weights: hand values, shift, overflow", ok);
  }

  {
    bool ok = schmitt_decide(-0.01, -0.05, -0.5) == SwitchDecision::Advance &&
              schmitt_decide(-0.7, -0.05, -0.5) == SwitchDecision::Reinforce &&
              schmitt_decide(-0.2, -0.05, -0.5) == SwitchDecision::Maintain &&
              schmitt_decide(-0.05, -0.05, -0.5) == SwitchDecision::Maintain;
    report("stage switch hysteresis decisions", ok);
  }

  if (failures) std::printf("%d check(s) FAILED\n", failures);
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerkit: inference-time steering benchmark harness"};
  app.require_subcommand(1);

  std::string config_path;
  int jobs = 1;
  bool plot = false;
  CLI::App* run = app.add_subcommand("run", "run an episode suite from a JSON config");
  run->add_option("--config", config_path, "suite config JSON")->required();
  run->add_option("--jobs", jobs, "worker threads (default 1)")->check(CLI::PositiveNumber);
  run->add_flag("--plot", plot, "also write SVG trajectory plots");

  std::string family = "move-cube";
  int count = 16;
  int chunk_T = 8;
  int chunk_D = 3;
  double noise = 0.01;
  std::uint64_t seed = 7;
  std::string out_path = "demos.json";
  CLI::App* demo = app.add_subcommand("demo-gen", "generate scripted demonstrations");
  demo->add_option("--family", family, "task family");
  demo->add_option("--count", count, "demo episodes")->check(CLI::PositiveNumber);
  demo->add_option("--chunk-T", chunk_T, "rows per chunk")->check(CLI::PositiveNumber);
  demo->add_option("--chunk-D", chunk_D, "action dimension")->check(CLI::Range(3, 16));
  demo->add_option("--noise", noise, "expert action noise");
  demo->add_option("--seed", seed, "rng seed");
  demo->add_option("--out", out_path, "output JSON path");

  std::string fit_family = "move-cube";
  int fit_stage = 1;
  int fit_count = 64;
  double fit_noise = 0.01;
  int fit_components = 2;
  int fit_iters = 50;
  std::uint64_t fit_seed = 7;
  std::string fit_out = "policy.json";
  CLI::App* fit = app.add_subcommand("fit-policy", "fit a mixture policy to scripted demos");
  fit->add_option("--family", fit_family, "task family");
  fit->add_option("--stage", fit_stage, "stage slot (1-based)")->check(CLI::PositiveNumber);
  fit->add_option("--count", fit_count, "demo episodes")->check(CLI::PositiveNumber);
  fit->add_option("--noise", fit_noise, "expert action noise");
  fit->add_option("--components", fit_components, "mixture components")
      ->check(CLI::PositiveNumber);
  fit->add_option("--iters", fit_iters, "EM iterations")->check(CLI::PositiveNumber);
  fit->add_option("--seed", fit_seed, "rng seed");
  fit->add_option("--out", fit_out, "output JSON path");

  CLI::App* check = app.add_subcommand("check", "run built-in numerical self-checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, jobs, plot);
    if (demo->parsed()) return cmd_demo_gen(family, count, chunk_T, chunk_D, noise, seed, out_path);
    if (fit->parsed())
      return cmd_fit_policy(fit_family, fit_stage, fit_count, fit_noise, fit_components,
                            fit_iters, fit_seed, fit_out);
    if (check->parsed()) return cmd_check();
  } catch (const DocumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
