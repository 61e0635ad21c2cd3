#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "steerkit/control.hpp"
#include "steerkit/planner_extern.hpp"
#include "steerkit/policy.hpp"
#include "steerkit/sim.hpp"
#include "steerkit/sim_io.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// steering variants

// Ablation axes: gradient injection (with its MCMC refinement), FK
// resampling, and RBF repulsion. Unguided is the base policy proper: a
// single sample, nothing evaluated against the reward during sampling.
enum class Variant { Unguided, Full, NoGrad, NoFk, NoRbf, GradOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Unguided: return "unguided";
    case Variant::Full: return "full";
    case Variant::NoGrad: return "no_grad";
    case Variant::NoFk: return "no_fk";
    case Variant::NoRbf: return "no_rbf";
    case Variant::GradOnly: return "grad_only";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::Unguided, Variant::Full, Variant::NoGrad, Variant::NoFk,
                    Variant::NoRbf, Variant::GradOnly})
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown steering variant '" + name + "'");
}

inline bool variant_uses_gradient(Variant v) {
  return v == Variant::Full || v == Variant::NoFk || v == Variant::NoRbf ||
         v == Variant::GradOnly;
}

inline GuidanceConfig apply_variant(GuidanceConfig base, Variant v) {
  switch (v) {
    case Variant::Unguided:
      base.batch_size = 1;
      base.fk_enabled = false;
      base.rbf_enabled = false;
      base.mcmc_steps = 0;
      break;
    case Variant::Full:
      break;
    case Variant::NoGrad:
      base.mcmc_steps = 0;  // refinement is gradient machinery
      break;
    case Variant::NoFk:
      base.fk_enabled = false;
      break;
    case Variant::NoRbf:
      base.rbf_enabled = false;
      break;
    case Variant::GradOnly:
      base.fk_enabled = false;
      base.rbf_enabled = false;
      break;
  }
  return base;
}

// ---------------------------------------------------------------------------
// policy bank

// One frozen policy per (task family, stage slot), fit by EM on scripted
// demos from the nominal scene. The bank is the "pretrained" side of every
// benchmark: perturbations happen at run time, the bank never sees them.
class PolicyBank {
 public:
  void put(const std::string& family, int slot, GaussianMixturePolicy policy) {
    policies_[key(family, slot)] = std::move(policy);
  }

  const GaussianMixturePolicy& at(const std::string& family, int slot) const {
    const auto it = policies_.find(key(family, slot));
    if (it == policies_.end())
      throw std::out_of_range("policy bank: no policy for " + key(family, slot));
    return it->second;
  }

  int slots(const std::string& family) const {
    int n = 0;
    while (policies_.count(key(family, n + 1))) ++n;
    return n;
  }

  bool empty() const { return policies_.empty(); }

 private:
  static std::string key(const std::string& family, int slot) {
    return family + "/" + std::to_string(slot);
  }
  std::map<std::string, GaussianMixturePolicy> policies_;
};

struct DemoConfig {
  int count = 64;
  double noise = 0.01;
  int components = 2;
  int em_iters = 50;
  std::uint64_t seed = 7;
};

inline PolicyBank build_policy_bank(const std::vector<std::string>& families, int T, int D,
                                    const DemoConfig& demo) {
  PolicyBank bank;
  for (const auto& family : families) {
    const TaskSpec task = make_task(family);
    Rng rng(demo.seed);
    const auto demos = generate_demos(task, demo.count, T, D, demo.noise, rng);
    const int slots = stage_count_for_family(family);
    for (int slot = 1; slot <= slots; ++slot) {
      std::vector<ActionChunk> chunks;
      chunks.reserve(demos.size());
      for (const auto& episode : demos)
        chunks.push_back(episode[static_cast<std::size_t>(slot - 1)]);
      Rng em_rng(demo.seed ^ 0x5bd1e995u);
      EmResult em = fit_gmm_em(chunks, demo.components, demo.em_iters, em_rng,
                               family + ":" + std::to_string(slot));
      bank.put(family, slot, std::move(em.policy));
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// run configuration

struct BenchConfig {
  std::vector<std::string> tasks = {"move-cube"};
  std::vector<PerturbationSpec> perturbations = {{}};
  std::vector<Variant> variants = {Variant::Full};
  int episodes_per_cell = 20;
  int max_chunks = 6;
  std::uint64_t root_seed = 1;
  int chunk_T = 8;
  int chunk_D = 3;
  GuidanceConfig guidance;
  ControllerConfig controller;
  DemoConfig demo;
  std::vector<std::string> planner_command;  // empty: scripted planner
  double planner_timeout = 30.0;
  std::string out_dir = "bench_out";
};

inline BenchConfig load_bench_config(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  BenchConfig cfg;
  if (j.contains("tasks")) {
    if (!j["tasks"].is_array()) throw DocumentError("schema violation at tasks: expected array");
    cfg.tasks.clear();
    for (std::size_t i = 0; i < j["tasks"].size(); ++i)
      cfg.tasks.push_back(str_at(j["tasks"][i], "tasks[" + std::to_string(i) + "]"));
  }
  if (j.contains("perturbations")) {
    if (!j["perturbations"].is_array())
      throw DocumentError("schema violation at perturbations: expected array");
    cfg.perturbations.clear();
    for (const auto& p : j["perturbations"]) cfg.perturbations.push_back(load_perturbation(p));
  }
  if (j.contains("variants")) {
    if (!j["variants"].is_array())
      throw DocumentError("schema violation at variants: expected array");
    cfg.variants.clear();
    for (std::size_t i = 0; i < j["variants"].size(); ++i) {
      const std::string name = str_at(j["variants"][i], "variants[" + std::to_string(i) + "]");
      try {
        cfg.variants.push_back(variant_from_name(name));
      } catch (const std::invalid_argument& e) {
        throw DocumentError(std::string("schema violation at variants: ") + e.what());
      }
    }
  }
  if (j.contains("episodes_per_cell"))
    cfg.episodes_per_cell = static_cast<int>(num_at(j["episodes_per_cell"], "episodes_per_cell"));
  if (cfg.episodes_per_cell < 0)
    throw DocumentError("schema violation at episodes_per_cell: must be >= 0");
  if (j.contains("max_chunks"))
    cfg.max_chunks = static_cast<int>(num_at(j["max_chunks"], "max_chunks"));
  if (cfg.max_chunks < 0) throw DocumentError("schema violation at max_chunks: must be >= 0");
  if (j.contains("root_seed"))
    cfg.root_seed = static_cast<std::uint64_t>(num_at(j["root_seed"], "root_seed"));
  if (j.contains("chunk")) {
    const auto& c = j["chunk"];
    if (c.contains("T")) cfg.chunk_T = static_cast<int>(num_at(c["T"], "chunk.T"));
    if (c.contains("D")) cfg.chunk_D = static_cast<int>(num_at(c["D"], "chunk.D"));
  }
  if (cfg.chunk_T < 1 || cfg.chunk_D < 3)
    throw DocumentError("schema violation at chunk: need T >= 1 and D >= 3");
  if (j.contains("guidance")) {
    const auto& g = j["guidance"];
    auto& gc = cfg.guidance;
    if (g.contains("backend")) {
      const std::string b = str_at(g["backend"], "guidance.backend");
      if (b == "diffusion")
        gc.backend = Backend::Diffusion;
      else if (b == "flow")
        gc.backend = Backend::Flow;
      else
        throw DocumentError("schema violation at guidance.backend: unknown '" + b + "'");
    }
    if (g.contains("batch_size"))
      gc.batch_size = static_cast<int>(num_at(g["batch_size"], "guidance.batch_size"));
    if (g.contains("denoise_steps"))
      gc.denoise_steps = static_cast<int>(num_at(g["denoise_steps"], "guidance.denoise_steps"));
    if (g.contains("beta_min")) gc.beta_min = num_at(g["beta_min"], "guidance.beta_min");
    if (g.contains("beta_max")) gc.beta_max = num_at(g["beta_max"], "guidance.beta_max");
    if (g.contains("lambda_max")) gc.lambda_max = num_at(g["lambda_max"], "guidance.lambda_max");
    if (g.contains("mcmc_steps"))
      gc.mcmc_steps = static_cast<int>(num_at(g["mcmc_steps"], "guidance.mcmc_steps"));
    if (g.contains("mcmc_step_scale"))
      gc.mcmc_step_scale = num_at(g["mcmc_step_scale"], "guidance.mcmc_step_scale");
    if (g.contains("mcmc_noise")) {
      if (!g["mcmc_noise"].is_boolean())
        throw DocumentError("schema violation at guidance.mcmc_noise: expected bool");
      gc.mcmc_noise = g["mcmc_noise"].get<bool>();
    }
    if (g.contains("rbf_epsilon")) gc.rbf_epsilon = num_at(g["rbf_epsilon"], "guidance.rbf_epsilon");
    if (g.contains("rbf_window")) gc.rbf_window = num_at(g["rbf_window"], "guidance.rbf_window");
    if (g.contains("fk_period"))
      gc.fk_period = static_cast<int>(num_at(g["fk_period"], "guidance.fk_period"));
    if (g.contains("ess_threshold"))
      gc.ess_threshold = num_at(g["ess_threshold"], "guidance.ess_threshold");
    if (g.contains("reward_on_clean")) {
      if (!g["reward_on_clean"].is_boolean())
        throw DocumentError("schema violation at guidance.reward_on_clean: expected bool");
      gc.reward_on_clean = g["reward_on_clean"].get<bool>();
    }
  }
  cfg.controller.lambda_max = cfg.guidance.lambda_max;
  if (j.contains("controller")) {
    const auto& c = j["controller"];
    if (c.contains("lambda_max"))
      cfg.controller.lambda_max = num_at(c["lambda_max"], "controller.lambda_max");
    if (c.contains("retry_limit"))
      cfg.controller.retry_limit = static_cast<int>(num_at(c["retry_limit"], "controller.retry_limit"));
    if (c.contains("reinforce_multiplier"))
      cfg.controller.reinforce_multiplier =
          num_at(c["reinforce_multiplier"], "controller.reinforce_multiplier");
    if (c.contains("anchored_lambda")) {
      if (!c["anchored_lambda"].is_boolean())
        throw DocumentError("schema violation at controller.anchored_lambda: expected bool");
      cfg.controller.anchored_lambda = c["anchored_lambda"].get<bool>();
    }
  }
  if (j.contains("demos")) {
    const auto& d = j["demos"];
    if (d.contains("count")) cfg.demo.count = static_cast<int>(num_at(d["count"], "demos.count"));
    if (d.contains("noise")) cfg.demo.noise = num_at(d["noise"], "demos.noise");
    if (d.contains("components"))
      cfg.demo.components = static_cast<int>(num_at(d["components"], "demos.components"));
    if (d.contains("em_iters"))
      cfg.demo.em_iters = static_cast<int>(num_at(d["em_iters"], "demos.em_iters"));
    if (d.contains("seed")) cfg.demo.seed = static_cast<std::uint64_t>(num_at(d["seed"], "demos.seed"));
  }
  if (j.contains("planner")) {
    const auto& p = j["planner"];
    if (p.contains("command")) {
      if (!p["command"].is_array())
        throw DocumentError("schema violation at planner.command: expected array");
      for (std::size_t i = 0; i < p["command"].size(); ++i)
        cfg.planner_command.push_back(
            str_at(p["command"][i], "planner.command[" + std::to_string(i) + "]"));
    }
    if (p.contains("timeout_s")) cfg.planner_timeout = num_at(p["timeout_s"], "planner.timeout_s");
  }
  if (j.contains("out_dir")) cfg.out_dir = str_at(j["out_dir"], "out_dir");
  return cfg;
}

// ---------------------------------------------------------------------------
// episodes

namespace bench_detail {

// Deterministic cost model standing in for per-episode wall time: the CSV
// must be byte-identical across runs and across --jobs settings, which real
// clock readings cannot be. Work units count score/reward evaluations; the
// repulsion term is quadratic in the batch.
inline double work_model_ms(const GuidanceConfig& g, int T, int D, int chunks) {
  const double td = static_cast<double>(T) * D;
  const double B = g.batch_size;
  const double S = g.denoise_steps;
  const int rbf_steps =
      g.rbf_enabled ? static_cast<int>(std::ceil(g.rbf_window * S)) : 0;
  double per_chunk = S * B * td * (1.0 + effective_mcmc_steps(g));
  per_chunk += static_cast<double>(rbf_steps) * B * B * td;
  return 1e-5 * per_chunk * chunks;
}

}  // namespace bench_detail

// One closed-loop episode: perturb the nominal scene, plan stages, then
// repeat {ground keypoints, sample a guided chunk, execute its best
// particle, feed the reward back through the stage controller} until the
// task predicate holds, the planner aborts, or the chunk budget runs out.
// Fully deterministic given the seed; planner and grounding failures are
// recorded as failed episodes, never thrown.
inline EpisodeResult run_episode(const PolicyBank& bank, const BenchConfig& cfg,
                                 const std::string& family, const PerturbationSpec& pert,
                                 Variant variant, std::uint64_t seed) {
  EpisodeResult res;
  Rng root(seed);
  TaskSpec task = make_task(family);
  Scene scene = nominal_task_scene(task);
  try {
    Rng prng = root.child(1000 + pert.seed);
    apply_perturbation(scene, task, pert, prng);
  } catch (const PerturbationError&) {
    res.failure_reason = "perturbation";
    return res;
  }

  ScriptedPlanner scripted;
  std::unique_ptr<ExternalPlanner> external;
  StagePlanner* planner = &scripted;
  if (!cfg.planner_command.empty()) {
    external = std::make_unique<ExternalPlanner>(cfg.planner_command, cfg.planner_timeout);
    planner = external.get();
  }

  const GuidanceConfig gcfg = apply_variant(cfg.guidance, variant);
  const int slots = bank.slots(family);

  PlanContext ctx;
  ctx.task_family = family;
  ctx.instruction = task.instruction;
  RewardProgram program;
  StageState state;
  try {
    ctx.keypoints = ground_keypoints(scene, task);
    ctx.dims = {cfg.chunk_T, cfg.chunk_D, ctx.keypoints.size(), ctx.keypoints.dim};
    program = planner->plan(ctx);
    state = make_stage_state(program, 1, cfg.controller);
  } catch (const GroundingError&) {
    res.failure_reason = "grounding";
    return res;
  } catch (const PlanningError&) {
    res.failure_reason = "planning";
    return res;
  }

  for (int chunk = 0; chunk < cfg.max_chunks; ++chunk) {
    if (check_success(scene, task)) {
      res.success = true;
      break;
    }
    try {
      ctx.keypoints = ground_keypoints(scene, task);
    } catch (const GroundingError&) {
      res.failure_reason = "grounding";
      break;
    }
    const GaussianMixturePolicy& policy = bank.at(family, std::min(state.stage, slots));
    const double lambda_used = variant_uses_gradient(variant) ? state.lambda : 0.0;
    Rng chunk_rng = root.child(10 + static_cast<std::uint64_t>(chunk));
    GuidedResult g =
        guided_denoise(policy, program, state.stage, ctx.keypoints,
                       {scene.gripper.x, scene.gripper.y}, gcfg, lambda_used, chunk_rng);
    execute_chunk(scene, g.best, &res.gripper_path);
    const double r_t = g.final_rewards[static_cast<std::size_t>(g.best_index)];
    res.trace.push_back({state.stage, lambda_used, r_t});
    ++res.chunks;
    if (check_success(scene, task)) {
      res.success = true;
      break;
    }
    try {
      const StepOutcome out = step_controller(state, r_t, *planner, program, ctx, cfg.controller);
      if (out.aborted) {
        res.failure_reason = "aborted";
        break;
      }
    } catch (const PlanningError&) {
      res.failure_reason = "planning";
      break;
    }
  }
  res.final_stage = state.stage;
  if (!res.success && res.failure_reason.empty()) res.failure_reason = "budget";
  return res;
}

// ---------------------------------------------------------------------------
// suites

struct EpisodeRow {
  int episode_id = 0;
  std::string task;
  std::string perturbation;
  std::string variant;
  std::uint64_t seed = 0;
  bool success = false;
  int chunks = 0;
  int final_stage = 1;
  double mean_lambda = 0.0;
  double wall_ms = 0.0;
};

struct SummaryCell {
  std::string task;
  std::string perturbation;
  std::string variant;
  int episodes = 0;
  int successes = 0;

  double sr() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
  double se() const {
    if (!episodes) return 0.0;
    const double p = sr();
    return std::sqrt(p * (1.0 - p) / episodes);
  }
};

struct SuiteResult {
  std::vector<EpisodeRow> rows;
  std::vector<SummaryCell> summary;  // cell order follows the config grid
  std::vector<EpisodeResult> episodes;  // index-aligned with rows
};

// Cross product of tasks x perturbations x variants, episodes_per_cell
// seeds each, seeded root_seed + episode index. Episodes are independent,
// so the worker pool only partitions indices; rows land at their index and
// the output is identical for every jobs setting.
inline SuiteResult run_suite(const BenchConfig& cfg, int jobs = 1) {
  if (jobs < 1) throw std::invalid_argument("run_suite: jobs must be >= 1");
  const PolicyBank bank = build_policy_bank(cfg.tasks, cfg.chunk_T, cfg.chunk_D, cfg.demo);

  struct Cell {
    const std::string* task;
    const PerturbationSpec* pert;
    Variant variant;
  };
  std::vector<Cell> cells;
  for (const auto& t : cfg.tasks)
    for (const auto& p : cfg.perturbations)
      for (Variant v : cfg.variants) cells.push_back({&t, &p, v});

  const int total = static_cast<int>(cells.size()) * cfg.episodes_per_cell;
  SuiteResult out;
  out.rows.resize(static_cast<std::size_t>(total));
  out.episodes.resize(static_cast<std::size_t>(total));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= total) return;
      const Cell& cell = cells[static_cast<std::size_t>(i / cfg.episodes_per_cell)];
      const std::uint64_t seed = cfg.root_seed + static_cast<std::uint64_t>(i);
      EpisodeResult ep = run_episode(bank, cfg, *cell.task, *cell.pert, cell.variant, seed);
      EpisodeRow row;
      row.episode_id = i;
      row.task = *cell.task;
      row.perturbation = perturbation_name(cell.pert->kind);
      row.variant = variant_name(cell.variant);
      row.seed = seed;
      row.success = ep.success;
      row.chunks = ep.chunks;
      row.final_stage = ep.final_stage;
      row.mean_lambda = ep.mean_lambda();
      row.wall_ms = bench_detail::work_model_ms(apply_variant(cfg.guidance, cell.variant),
                                                cfg.chunk_T, cfg.chunk_D, ep.chunks);
      out.rows[static_cast<std::size_t>(i)] = std::move(row);
      out.episodes[static_cast<std::size_t>(i)] = std::move(ep);
    }
  };

  if (total > 0) {
    if (jobs == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      const int n = std::min(jobs, total);
      pool.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
  }

  for (std::size_t c = 0; c < cells.size(); ++c) {
    SummaryCell cell;
    cell.task = *cells[c].task;
    cell.perturbation = perturbation_name(cells[c].pert->kind);
    cell.variant = variant_name(cells[c].variant);
    cell.episodes = cfg.episodes_per_cell;
    for (int e = 0; e < cfg.episodes_per_cell; ++e)
      cell.successes +=
          out.rows[c * static_cast<std::size_t>(cfg.episodes_per_cell) + e].success ? 1 : 0;
    out.summary.push_back(std::move(cell));
  }
  return out;
}

namespace bench_detail {

inline void append_double(std::string& s, double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  s += buf;
}

}  // namespace bench_detail

inline std::string episodes_csv(const SuiteResult& suite) {
  std::string csv =
      "episode_id,task,perturbation,variant,seed,success,chunks,final_stage,mean_lambda,wall_ms\n";
  for (const auto& r : suite.rows) {
    csv += std::to_string(r.episode_id);
    csv += ',';
    csv += r.task;
    csv += ',';
    csv += r.perturbation;
    csv += ',';
    csv += r.variant;
    csv += ',';
    csv += std::to_string(r.seed);
    csv += ',';
    csv += r.success ? '1' : '0';
    csv += ',';
    csv += std::to_string(r.chunks);
    csv += ',';
    csv += std::to_string(r.final_stage);
    csv += ',';
    bench_detail::append_double(csv, r.mean_lambda, 6);
    csv += ',';
    bench_detail::append_double(csv, r.wall_ms, 3);
    csv += '\n';
  }
  return csv;
}

inline std::string summary_csv(const SuiteResult& suite) {
  std::string csv = "task,perturbation,variant,episodes,successes,sr,se\n";
  for (const auto& c : suite.summary) {
    csv += c.task;
    csv += ',';
    csv += c.perturbation;
    csv += ',';
    csv += c.variant;
    csv += ',';
    csv += std::to_string(c.episodes);
    csv += ',';
    csv += std::to_string(c.successes);
    csv += ',';
    bench_detail::append_double(csv, c.sr(), 4);
    csv += ',';
    bench_detail::append_double(csv, c.se(), 4);
    csv += '\n';
  }
  return csv;
}

}  // namespace steerkit
