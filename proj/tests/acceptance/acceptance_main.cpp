// Release gate: every shipping criterion exercised end to end, one verdict
// line per criterion. Exits nonzero if any criterion fails. Heavier than the
// unit suite on purpose: this is the binary a release is judged by.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "steerkit/bench.hpp"

#include "../testutil.hpp"

using namespace steerkit;

namespace {

struct Gate {
  int failed = 0;

  void verdict(int n, const std::string& what, bool ok, const std::string& detail,
               double seconds) {
    std::printf("%s criterion %2d: %s (%s, %.1fs)\n", ok ? "PASS" : "FAIL", n, what.c_str(),
                detail.c_str(), seconds);
    if (!ok) ++failed;
  }
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start_)
               .count() /
           1000.0;
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

bool all_off_reduction(std::string& detail) {
  Rng meta(1001);
  const RewardDims dims0{1, 1, 0, 2};
  int ok = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    const int T = 1 + static_cast<int>(meta.next_u64() % 4);
    const int D = 1 + static_cast<int>(meta.next_u64() % 3);
    const int M = 1 + static_cast<int>(meta.next_u64() % 3);
    const int B = 1 + static_cast<int>(meta.next_u64() % 8);
    const int S = 4 + static_cast<int>(meta.next_u64() % 21);
    const std::uint64_t seed = meta.next_u64();
    auto p = testutil::random_mixture(T, D, M, meta);

    RewardDims dims = dims0;
    dims.T = T;
    dims.D = D;
    const RewardProgram prog = parse_reward("reward: 0", dims);
    const KeypointSet kps;

    GuidanceConfig cfg;
    cfg.batch_size = B;
    cfg.denoise_steps = S;
    cfg.fk_enabled = false;
    cfg.rbf_enabled = false;
    cfg.mcmc_steps = 0;
    cfg.backend = trial % 2 == 0 ? Backend::Diffusion : Backend::Flow;

    Rng r1(seed), r2(seed);
    const GuidedResult g = guided_denoise(p, prog, 1, kps, {0.0, 0.0}, cfg, 0.0, r1);
    const std::vector<ActionChunk> plain =
        cfg.backend == Backend::Diffusion
            ? sample_unguided(p, B, build_noise_schedule(S, cfg.beta_min, cfg.beta_max), r2)
            : sample_unguided_flow(p, B, S, r2);

    bool same = true;
    for (int i = 0; i < B && same; ++i)
      for (int e = 0; e < p.dim() && same; ++e)
        same = g.batch.chunks[static_cast<std::size_t>(i)][e] ==
               plain[static_cast<std::size_t>(i)][e];
    ok += same ? 1 : 0;
  }
  detail = fmt("%d/%d policy/seed draws bitwise equal, both backends", ok, trials);
  return ok == trials;
}

// ---------------------------------------------------------------- criterion 2

bool score_correctness(std::string& detail) {
  Rng rng(2002);
  double worst_eps = 0.0, worst_vel = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 1 + static_cast<int>(rng.next_u64() % 3);
    const int D = 1 + static_cast<int>(rng.next_u64() % 2);
    const int M = 1 + static_cast<int>(rng.next_u64() % 4);
    auto p = testutil::random_mixture(T, D, M, rng);
    ActionChunk a(T, D);
    for (int i = 0; i < a.size(); ++i) a[i] = 4.0 * rng.uniform01() - 2.0;

    {
      const int K = 8 + static_cast<int>(rng.next_u64() % 25);
      const NoiseSchedule sched = build_noise_schedule(K, 1e-4, 0.25);
      const int k = 1 + static_cast<int>(rng.next_u64() % K);
      const double ab = sched.alpha_bar_at(k);
      auto logp = [&](const std::vector<double>& x) {
        return testutil::ref_log_marginal_diffusion(p, x, ab);
      };
      const std::vector<double> score = testutil::fd_gradient(logp, a.v, 1e-4);
      std::vector<double> want(score.size());
      for (std::size_t i = 0; i < score.size(); ++i) want[i] = -std::sqrt(1.0 - ab) * score[i];
      const ActionChunk eps = epsilon_analytic(p, a, k, sched);
      worst_eps = std::max(worst_eps, testutil::rel_error(eps.v, want));
    }
    {
      const double k = 0.05 + 0.85 * rng.uniform01();
      auto logp = [&](const std::vector<double>& x) {
        return testutil::ref_log_marginal_flow(p, x, k);
      };
      const std::vector<double> score = testutil::fd_gradient(logp, a.v, 1e-4);
      std::vector<double> want(score.size());
      for (std::size_t i = 0; i < score.size(); ++i)
        want[i] = -k * score[i] - (a.v[i] + k * k * score[i]) / (1.0 - k);
      const ActionChunk v = velocity_analytic(p, a, k);
      worst_vel = std::max(worst_vel, testutil::rel_error(v.v, want));
    }
  }
  detail = fmt("200 triples each: worst rel err eps %.2e, velocity %.2e", worst_eps, worst_vel);
  return worst_eps < 1e-5 && worst_vel < 1e-5;
}

// ---------------------------------------------------------------- criterion 3

bool reward_autodiff(std::string& detail) {
  const RewardDims dims{6, 3, 3, 2};
  Rng rng(3003);
  double worst = 0.0;
  for (int pi = 0; pi < 20; ++pi) {
    const std::string text = testutil::gen_reward_program(rng, dims);
    const RewardProgram prog = parse_reward(text, dims);
    const KeypointSet kps = testutil::gen_far_keypoints(rng, dims.n, dims.kp_dim);
    const std::vector<double> grip{rng.uniform01(), rng.uniform01()};
    for (int c = 0; c < 10; ++c) {
      ActionChunk chunk(dims.T, dims.D);
      for (int e = 0; e < chunk.size(); ++e) chunk[e] = 0.6 * (rng.uniform01() - 0.5);
      for (int s = 1; s <= prog.stage_count(); ++s)
        worst = std::max(worst, check_grad(prog, s, chunk, kps, grip, 1e-5));
    }
  }
  detail = fmt("20 programs x 10 chunks: worst rel err %.2e", worst);
  return worst < 1e-4;
}

// ---------------------------------------------------------------- criterion 4

bool tilted_posterior(std::string& detail) {
  GaussianMixturePolicy prior;
  prior.T = 1;
  prior.D = 2;
  prior.components.resize(1);
  prior.components[0].weight = 1.0;
  prior.components[0].mean = {0.0, 0.0};
  prior.components[0].diag_cov = {1.0, 1.0};
  const RewardDims dims{1, 2, 1, 2};
  const RewardProgram prog =
      parse_reward("reward: -0.5 * (norm2(a[0][0:2] - p[0][0:2]) ^ 2)", dims);
  KeypointSet kps;
  kps.labels = {"target"};
  kps.coords = {2.0, 0.0};

  // independent oracle: self-normalized importance sampling from the prior
  Rng oracle(555);
  const int N = 4096;
  std::vector<double> lw(N);
  std::vector<std::array<double, 2>> xs(N);
  for (int i = 0; i < N; ++i) {
    xs[i] = {oracle.normal(), oracle.normal()};
    const double dx = xs[i][0] - 2.0, dy = xs[i][1];
    lw[i] = -0.5 * (dx * dx + dy * dy);
  }
  const double lz = logsumexp(lw);
  double snis[2] = {0.0, 0.0}, w2 = 0.0;
  for (int i = 0; i < N; ++i) {
    const double w = std::exp(lw[i] - lz);
    snis[0] += w * xs[i][0];
    snis[1] += w * xs[i][1];
    w2 += w * w;
  }
  const double snis_se = std::sqrt(0.5 * w2);  // posterior variance 1/2 per dim

  // the oracle itself must sit on the analytic tilted mean (1, 0)
  if (std::abs(snis[0] - 1.0) > 3.0 * snis_se || std::abs(snis[1]) > 3.0 * snis_se) {
    detail = fmt("SNIS oracle off the analytic mean: (%.4f, %.4f)", snis[0], snis[1]);
    return false;
  }

  // finite-B SMC is biased and a single run's ESS-based error bar
  // understates the truth; independent replicates give an honest SE
  auto replicated = [&](GuidanceConfig cfg, double lambda, std::uint64_t seed0, double mean[2],
                        double se[2]) {
    const int runs = 4;
    std::array<std::array<double, 2>, runs> per{};
    for (int r = 0; r < runs; ++r) {
      Rng rng(seed0 + static_cast<std::uint64_t>(r));
      const GuidedResult res = guided_denoise(prior, prog, 1, kps, {0.0, 0.0}, cfg, lambda, rng);
      for (int i = 0; i < cfg.batch_size; ++i) {
        per[r][0] += res.batch.weights[static_cast<std::size_t>(i)] *
                     res.batch.chunks[static_cast<std::size_t>(i)][0];
        per[r][1] += res.batch.weights[static_cast<std::size_t>(i)] *
                     res.batch.chunks[static_cast<std::size_t>(i)][1];
      }
    }
    for (int d = 0; d < 2; ++d) {
      double mu = 0.0;
      for (const auto& m : per) mu += m[d];
      mu /= runs;
      double var = 0.0;
      for (const auto& m : per) var += (m[d] - mu) * (m[d] - mu);
      var /= (runs - 1);
      mean[d] = mu;
      se[d] = std::sqrt(var / runs);
    }
  };

  GuidanceConfig cfg;
  cfg.batch_size = 4096;
  cfg.mcmc_steps = 0;
  cfg.rbf_enabled = false;
  cfg.fk_enabled = true;

  bool ok = true;
  std::string parts;
  {
    GuidanceConfig d = cfg;
    d.denoise_steps = 128;
    d.fk_period = 4;
    double mean[2], se[2];
    replicated(d, 1.0, 31337, mean, se);
    for (int i = 0; i < 2; ++i) {
      const double tol = 3.0 * std::sqrt(snis_se * snis_se + se[i] * se[i]);
      ok = ok && std::abs(mean[i] - snis[i]) < tol;
    }
    parts += fmt("diffusion (%.3f, %.3f)", mean[0], mean[1]);
  }
  {
    GuidanceConfig f = cfg;
    f.backend = Backend::Flow;
    f.denoise_steps = 256;
    f.fk_period = 8;
    double mean[2], se[2];
    replicated(f, 0.0, 7100, mean, se);
    for (int i = 0; i < 2; ++i) {
      const double tol = 3.0 * std::sqrt(snis_se * snis_se + se[i] * se[i]);
      ok = ok && std::abs(mean[i] - snis[i]) < tol;
    }
    parts += fmt(", flow (%.3f, %.3f)", mean[0], mean[1]);
  }
  detail = fmt("B=4096 x4 runs vs SNIS (%.3f, %.3f): %s", snis[0], snis[1], parts.c_str());
  return ok;
}

// ---------------------------------------------------------------- criterion 5

bool fk_mechanics(std::string& detail) {
  bool ok = true;

  const std::vector<double> w = fk_weights({0.0, std::log(2.0)});
  ok = ok && std::abs(w[0] - 1.0 / 3.0) < 1e-12 && std::abs(w[1] - 2.0 / 3.0) < 1e-12;

  const std::vector<double> shifted = fk_weights({123.456, 123.456 + std::log(2.0)});
  ok = ok && std::abs(shifted[0] - w[0]) < 1e-12 && std::abs(shifted[1] - w[1]) < 1e-12;

  const std::vector<double> hot = fk_weights({1000.0, 999.0, 0.0});
  double sum = 0.0;
  for (double x : hot) {
    ok = ok && std::isfinite(x);
    sum += x;
  }
  ok = ok && std::abs(sum - 1.0) < 1e-12;

  // multinomial resampling frequencies against the weights themselves
  const std::vector<double> probs = {0.2, 0.3, 0.5};
  Rng rng(5005);
  long counts[3] = {0, 0, 0};
  const int resamples = 10000;
  const int B = 3;
  for (int r = 0; r < resamples; ++r)
    for (int anc : steering_detail::sample_ancestors(probs, B, rng)) ++counts[anc];
  const double n = static_cast<double>(resamples) * B;
  double stat = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double expect = n * probs[static_cast<std::size_t>(i)];
    stat += (counts[i] - expect) * (counts[i] - expect) / expect;
  }
  const double p = testutil::chi_square_p_value(stat, 2.0);
  ok = ok && p > 0.01;

  detail = fmt("hand values, shift, overflow ok; chi-square p=%.3f over %d resamples", p,
               resamples);
  return ok;
}

// ---------------------------------------------------------------- criterion 6

// Planner that must not be consulted: in-band rewards never advance,
// reinforce, or recover.
struct TrippedPlanner final : StagePlanner {
  mutable bool tripped = false;
  RewardProgram plan(const PlanContext&) override {
    tripped = true;
    throw PlanningError("plan must not be called");
  }
  std::optional<RewardProgram> next_stage(const PlanContext&, int,
                                          const std::vector<double>&) override {
    tripped = true;
    return std::nullopt;
  }
  RecoveryAction recover(const PlanContext&, int, const std::vector<double>&) override {
    tripped = true;
    return RecoveryAction::Abort;
  }
};

bool controller_suite(std::string& detail) {
  bool ok = true;

  // worked examples: the ratio form, its neutral/degenerate points, and the
  // anchored form that keeps distance-style rewards monotone
  ok = ok && adaptive_lambda(-1.0, -1.0, 1.0) == 0.5;
  ok = ok && std::abs(adaptive_lambda(0.0, -1.0, 1.0) - sigmoid(1.0)) < 1e-15;
  ok = ok && std::abs(adaptive_lambda(-2.0, -1.0, 1.0) - sigmoid(-1.0)) < 1e-15;
  ok = ok && adaptive_lambda(0.7, 0.0, 1.0) == 0.5;
  ok = ok && adaptive_lambda(0.7, 9e-7, 2.0) == 1.0;
  ok = ok && std::abs(adaptive_lambda_anchored(-2.0, -1.0, -3.0, 1.0) - sigmoid(0.5)) < 1e-15;
  ok = ok && std::abs(adaptive_lambda_anchored(0.0, -1.0, -3.0, 1.0) - sigmoid(-0.5)) < 1e-15;
  ok = ok && adaptive_lambda_anchored(-0.3, -0.3, -0.5, 1.0) == 0.5;
  ok = ok && adaptive_lambda_anchored(0.2, -0.5, -0.5, 1.0) == 0.5;

  ok = ok && schmitt_decide(-0.01, -0.05, -0.5) == SwitchDecision::Advance;
  ok = ok && schmitt_decide(-0.7, -0.05, -0.5) == SwitchDecision::Reinforce;
  ok = ok && schmitt_decide(-0.2, -0.05, -0.5) == SwitchDecision::Maintain;
  ok = ok && schmitt_decide(-0.05, -0.05, -0.5) == SwitchDecision::Maintain;
  ok = ok && schmitt_decide(-0.5, -0.05, -0.5) == SwitchDecision::Maintain;
  if (!ok) {
    detail = "a worked example disagrees";
    return false;
  }

  // hysteresis property: strictly in-band traces never leave the stage
  const RewardDims dims{4, 3, 1, 2};
  const RewardProgram prog = parse_reward(
      "stage one { reward: 0; high: -0.05; low: -0.5; }\n"
      "stage two { reward: 0; high: -0.05; low: -0.5; }",
      dims);
  PlanContext ctx;
  ctx.dims = dims;
  ControllerConfig ccfg;
  Rng rng(6006);
  int traces_ok = 0;
  const int traces = 1000;
  for (int t = 0; t < traces; ++t) {
    TrippedPlanner planner;
    RewardProgram live = parse_reward(
        "stage one { reward: 0; high: -0.05; low: -0.5; }\n"
        "stage two { reward: 0; high: -0.05; low: -0.5; }",
        dims);
    StageState state = make_stage_state(live, 1, ccfg);
    bool stayed = true;
    for (int i = 0; i < 16; ++i) {
      const double r = -0.5 + 0.45 * rng.uniform01();  // [-0.5, -0.05]
      const StepOutcome out = step_controller(state, r, planner, live, ctx, ccfg);
      stayed = stayed && out.decision == SwitchDecision::Maintain && state.stage == 1 &&
               !out.task_complete && !out.aborted && !planner.tripped;
    }
    traces_ok += stayed ? 1 : 0;
  }
  detail = fmt("worked examples exact; %d/%d in-band traces held their stage", traces_ok, traces);
  return traces_ok == traces;
}

// ------------------------------------------------------- benchmark criteria

BenchConfig tuned_bench() {
  BenchConfig cfg;
  cfg.guidance.batch_size = 32;
  cfg.guidance.denoise_steps = 32;
  cfg.guidance.lambda_max = 1.0;
  cfg.guidance.mcmc_steps = 16;
  cfg.guidance.mcmc_step_scale = 0.01;
  cfg.guidance.mcmc_noise = false;
  cfg.controller.lambda_max = 1.0;
  cfg.max_chunks = 12;
  cfg.root_seed = 20260816;
  return cfg;
}

bool ood_benchmark(std::string& detail) {
  const int eps = 100;
  bool ok = true;
  std::string parts;
  for (const std::string family : {"move-cube", "open-drawer"}) {
    for (int pi = 0; pi < 2; ++pi) {
      PerturbationSpec pert;
      if (pi == 0) {
        pert.kind = PerturbationSpec::Kind::PositionShift;
      } else {
        pert.kind = PerturbationSpec::Kind::InstructionChange;
        pert.new_object_label = family == "move-cube" ? "blue" : "switch";
        pert.new_goal_label = family == "move-cube" ? "yellow_zone" : "";
      }
      BenchConfig cfg = tuned_bench();
      cfg.tasks = {family};
      cfg.perturbations = {pert};
      cfg.variants = {Variant::Unguided, Variant::Full};
      cfg.episodes_per_cell = eps;
      const SuiteResult s = run_suite(cfg, 1);
      const double delta = s.summary[1].sr() - s.summary[0].sr();
      ok = ok && delta >= 0.30;
      parts += fmt("%s/%s %+.0f ", family.c_str(), pi == 0 ? "shift" : "instr", 100.0 * delta);
    }
  }
  detail = fmt("SR(full)-SR(unguided) pts: %s(n=%d/cell)", parts.c_str(), eps);
  return ok;
}

bool ablation_ordering(std::string& detail) {
  BenchConfig cfg = tuned_bench();
  cfg.tasks = {"move-cube"};
  PerturbationSpec pert;
  pert.kind = PerturbationSpec::Kind::PositionShift;
  pert.shift_min = 0.12;  // deep OOD so pure selection cannot luck through
  cfg.perturbations = {pert};
  cfg.variants = {Variant::Unguided, Variant::Full, Variant::NoGrad, Variant::NoFk,
                  Variant::NoRbf};
  cfg.episodes_per_cell = 80;
  cfg.root_seed = 777;
  const SuiteResult s = run_suite(cfg, 1);
  const double unguided = s.summary[0].sr();
  const double full = s.summary[1].sr();
  const double no_grad = s.summary[2].sr();
  const double no_fk = s.summary[3].sr();
  const double no_rbf = s.summary[4].sr();
  const bool ok =
      full >= no_fk && full >= no_rbf && std::abs(no_grad - unguided) <= 0.10 + 1e-12;
  detail = fmt("full %.2f >= no_fk %.2f, no_rbf %.2f; |no_grad %.2f - unguided %.2f| <= 0.10 "
               "(n=80/cell)",
               full, no_fk, no_rbf, no_grad, unguided);
  return ok;
}

bool batch_scaling(std::string& detail) {
  const int eps = 40;
  std::vector<double> sr, se, wall;
  for (int B : {4, 8, 16, 32}) {
    BenchConfig cfg = tuned_bench();
    cfg.tasks = {"move-cube"};
    PerturbationSpec pert;
    pert.kind = PerturbationSpec::Kind::PositionShift;
    cfg.perturbations = {pert};
    cfg.variants = {Variant::Full};
    cfg.episodes_per_cell = eps;
    cfg.guidance.batch_size = B;
    const Timer t;
    const SuiteResult s = run_suite(cfg, 1);
    wall.push_back(t.seconds() / eps);
    sr.push_back(s.summary[0].sr());
    se.push_back(s.summary[0].se());
  }
  bool ok = true;
  for (std::size_t i = 1; i < sr.size(); ++i) {
    const double slack = std::sqrt(se[i] * se[i] + se[i - 1] * se[i - 1]);
    ok = ok && sr[i] >= sr[i - 1] - slack;  // nondecreasing within 1 SE
    ok = ok && wall[i] > wall[i - 1];       // strictly more compute
  }
  detail = fmt("B=4..32: sr %.2f %.2f %.2f %.2f, wall/ep %.0f %.0f %.0f %.0fms (n=%d/cell)",
               sr[0], sr[1], sr[2], sr[3], 1000 * wall[0], 1000 * wall[1], 1000 * wall[2],
               1000 * wall[3], eps);
  return ok;
}

bool suite_determinism(std::string& detail) {
  BenchConfig cfg = tuned_bench();
  cfg.tasks = {"move-cube", "open-drawer"};
  PerturbationSpec shift;
  shift.kind = PerturbationSpec::Kind::PositionShift;
  cfg.perturbations = {{}, shift};
  cfg.variants = {Variant::Unguided, Variant::Full};
  cfg.episodes_per_cell = 3;
  cfg.guidance.batch_size = 16;
  cfg.guidance.denoise_steps = 16;
  cfg.guidance.mcmc_steps = 8;
  cfg.max_chunks = 6;

  const SuiteResult a = run_suite(cfg, 1);
  const SuiteResult b = run_suite(cfg, 1);
  const SuiteResult c = run_suite(cfg, 4);
  const bool ok = episodes_csv(a) == episodes_csv(b) && episodes_csv(a) == episodes_csv(c) &&
                  summary_csv(a) == summary_csv(b) && summary_csv(a) == summary_csv(c);
  detail = fmt("%zu-row CSV byte-identical across reruns and jobs=4", a.rows.size());
  return ok;
}

}  // namespace

void run(Gate& gate, int n, const std::string& what, bool (*fn)(std::string&)) {
  Timer t;
  std::string detail;
  bool ok = false;
  try {
    ok = fn(detail);
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  gate.verdict(n, what, ok, detail, t.seconds());
  std::fflush(stdout);
}

int main() {
  Gate gate;
  run(gate, 1, "all-off steering is bitwise the base sampler", all_off_reduction);
  run(gate, 2, "analytic scores match finite-difference oracles", score_correctness);
  run(gate, 3, "reward autodiff matches central differences", reward_autodiff);
  run(gate, 4, "steered population matches the tilted posterior", tilted_posterior);
  run(gate, 5, "potential weighting and resampling mechanics", fk_mechanics);
  run(gate, 6, "stage controller worked examples and hysteresis", controller_suite);
  run(gate, 7, "steering lifts OOD success by >= 30 points", ood_benchmark);
  run(gate, 8, "ablations order as claimed", ablation_ordering);
  run(gate, 9, "success scales with batch size, compute grows", batch_scaling);
  run(gate, 10, "suite CSVs are byte-identical across runs and jobs", suite_determinism);

  if (gate.failed) {
    std::printf("%d criterion(s) FAILED\n", gate.failed);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
