#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <optional>
#include <vector>

#include "steerkit/control.hpp"
#include "steerkit/rng.hpp"

using namespace steerkit;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

const RewardDims kPlanDims{8, 3, 2, 2};

KeypointSet cube_keypoints() {
  KeypointSet ks;
  ks.dim = 2;
  ks.labels = {"red", "green_zone"};
  ks.coords = {0.3, 0.45, 0.8, 0.8};
  return ks;
}

PlanContext cube_context() {
  PlanContext ctx;
  ctx.task_family = "move-cube";
  ctx.instruction = "move the red cube to the green zone";
  ctx.keypoints = cube_keypoints();
  ctx.dims = kPlanDims;
  return ctx;
}

RewardProgram two_stage_program() {
  const char* text =
      "stage s1 { reward: a[0][0];  high: -0.05;  low: -0.5; }\n"
      "stage s2 { reward: a[0][1];  high: -0.1;   low: -0.9; }\n";
  return parse_reward(text, RewardDims{1, 2, 0, 2});
}

// planner stub that records calls and returns canned answers; the reply is
// kept as program text because parsed programs are move-only
struct ProbePlanner : StagePlanner {
  int next_calls = 0;
  int recover_calls = 0;
  std::string next_reply_text;
  RecoveryAction recover_reply = RecoveryAction::RestartStage;

  RewardProgram plan(const PlanContext&) override { return two_stage_program(); }
  std::optional<RewardProgram> next_stage(const PlanContext&, int,
                                          const std::vector<double>&) override {
    ++next_calls;
    if (next_reply_text.empty()) return std::nullopt;
    return parse_reward(next_reply_text, RewardDims{1, 2, 0, 2});
  }
  RecoveryAction recover(const PlanContext&, int, const std::vector<double>&) override {
    ++recover_calls;
    return recover_reply;
  }
};

}  // namespace

TEST_CASE("adaptive lambda follows the literal ratio formula", "[control]") {
  // ratio 1 is the neutral point regardless of base
  CHECK(adaptive_lambda(-1.0, -1.0, 1.0) == 0.5);
  CHECK(adaptive_lambda(-0.3, -0.3, 1.0) == 0.5);
  CHECK(adaptive_lambda(2.0, 2.0, 4.0) == 2.0);

  // direct substitution: R_t = 0 gives sigmoid(1), R_t = 2 R_base gives
  // sigmoid(-1)
  CHECK(adaptive_lambda(0.0, -1.0, 1.0) == Catch::Approx(sigmoid(1.0)).epsilon(1e-15));
  CHECK(adaptive_lambda(-2.0, -1.0, 1.0) == Catch::Approx(sigmoid(-1.0)).epsilon(1e-15));

  // near-zero base falls back to the neutral point
  CHECK(adaptive_lambda(0.7, 0.0, 1.0) == 0.5);
  CHECK(adaptive_lambda(0.7, 9e-7, 2.0) == 1.0);

  // output bounds and lambda_max scaling
  Rng rng(123);
  for (int i = 0; i < 200; ++i) {
    const double rb = (rng.uniform01() - 0.5) * 4.0;
    const double rt = (rng.uniform01() - 0.5) * 4.0;
    const double lm = 0.1 + 2.0 * rng.uniform01();
    const double l = adaptive_lambda(rt, rb, lm);
    CHECK(l > 0.0);
    CHECK(l < lm + 1e-15);
    CHECK(adaptive_lambda(rt, rb, 2.0 * lm) == Catch::Approx(2.0 * l).epsilon(1e-12));
  }

  CHECK_THROWS_AS(adaptive_lambda(0.0, -1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(adaptive_lambda(0.0, -1.0, -1.0), std::invalid_argument);
}

TEST_CASE("anchored lambda decays as distance-style rewards improve", "[control]") {
  // R_t = R_base sits at the neutral point
  CHECK(adaptive_lambda_anchored(-0.3, -0.3, -0.5, 1.0) == 0.5);

  // the case the literal formula inverts: a worse reward now raises
  // guidance, a better one lowers it
  const double worse = adaptive_lambda_anchored(-2.0, -1.0, -3.0, 1.0);
  const double better = adaptive_lambda_anchored(0.0, -1.0, -3.0, 1.0);
  CHECK(worse == Catch::Approx(sigmoid(0.5)).epsilon(1e-15));
  CHECK(better == Catch::Approx(sigmoid(-0.5)).epsilon(1e-15));
  CHECK(worse > 0.5);
  CHECK(better < 0.5);

  // monotone nonincreasing in R_t
  double prev = 2.0;
  for (double rt = -3.0; rt <= 1.0; rt += 0.05) {
    const double l = adaptive_lambda_anchored(rt, -1.0, -3.0, 1.0);
    CHECK(l <= prev + 1e-15);
    prev = l;
  }

  // the clamp pins extremes to sigmoid(+-1)
  CHECK(adaptive_lambda_anchored(-100.0, -1.0, -3.0, 1.0) ==
        Catch::Approx(sigmoid(1.0)).epsilon(1e-15));
  CHECK(adaptive_lambda_anchored(100.0, -1.0, -3.0, 1.0) ==
        Catch::Approx(sigmoid(-1.0)).epsilon(1e-15));

  // degenerate anchor falls back to neutral
  CHECK(adaptive_lambda_anchored(0.2, -0.5, -0.5, 1.0) == 0.5);

  Rng rng(321);
  for (int i = 0; i < 200; ++i) {
    const double rl = -1.0 - rng.uniform01();
    const double rb = rl + 0.01 + rng.uniform01();
    const double rt = (rng.uniform01() - 0.5) * 6.0;
    const double l = adaptive_lambda_anchored(rt, rb, rl, 1.0);
    CHECK(l >= sigmoid(-1.0) - 1e-15);
    CHECK(l <= sigmoid(1.0) + 1e-15);
  }
}

TEST_CASE("schmitt trigger partitions the reward line", "[control]") {
  const double hi = -0.05, lo = -0.5;
  CHECK(schmitt_decide(hi + 0.01, hi, lo) == SwitchDecision::Advance);
  CHECK(schmitt_decide(0.5 * (hi + lo), hi, lo) == SwitchDecision::Maintain);
  CHECK(schmitt_decide(lo - 0.01, hi, lo) == SwitchDecision::Reinforce);

  // boundaries belong to Maintain: the band is closed
  CHECK(schmitt_decide(hi, hi, lo) == SwitchDecision::Maintain);
  CHECK(schmitt_decide(lo, hi, lo) == SwitchDecision::Maintain);

  CHECK_THROWS_AS(schmitt_decide(0.0, -0.5, -0.05), std::invalid_argument);
  CHECK_THROWS_AS(schmitt_decide(0.0, -0.5, -0.5), std::invalid_argument);

  // exactly one case fires for any reward
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double a = (rng.uniform01() - 0.5) * 4.0;
    const double b = (rng.uniform01() - 0.5) * 4.0;
    const double lo2 = std::min(a, b), hi2 = std::max(a, b) + 1e-6;
    const double r = (rng.uniform01() - 0.5) * 8.0;
    const SwitchDecision d = schmitt_decide(r, hi2, lo2);
    if (r > hi2) {
      CHECK(d == SwitchDecision::Advance);
    } else if (r < lo2) {
      CHECK(d == SwitchDecision::Reinforce);
    } else {
      CHECK(d == SwitchDecision::Maintain);
    }
  }
}

TEST_CASE("in-band reward traces never leave the stage", "[control]") {
  // hysteresis: oscillation strictly inside (R_low, R_high) causes no
  // switching, whatever the trace does
  ControllerConfig cfg;
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    ProbePlanner planner;
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    PlanContext ctx = cube_context();
    const int len = 2 + static_cast<int>(rng.uniform01() * 9);
    for (int t = 0; t < len; ++t) {
      const double span = state.r_high - state.r_low;
      const double r = state.r_low + span * (0.01 + 0.98 * rng.uniform01());
      const StepOutcome out = step_controller(state, r, planner, program, ctx, cfg);
      CHECK(out.decision == SwitchDecision::Maintain);
      CHECK_FALSE(out.task_complete);
      CHECK_FALSE(out.aborted);
      CHECK_FALSE(out.stage_restarted);
      CHECK(state.lambda > 0.0);
      CHECK(state.lambda <= cfg.lambda_max);
    }
    CHECK(state.stage == 1);
    CHECK(planner.next_calls == 0);
    CHECK(planner.recover_calls == 0);
  }
}

TEST_CASE("controller transitions: advance, reinforce, recover", "[control]") {
  ControllerConfig cfg;
  ProbePlanner planner;
  PlanContext ctx = cube_context();

  SECTION("terminal advance sets the completion flag") {
    const char* text = "stage only { reward: a[0][0];  high: -0.05;  low: -0.5; }\n";
    RewardProgram program = parse_reward(text, RewardDims{1, 2, 0, 2});
    StageState state = make_stage_state(program, 1, cfg);
    const StepOutcome out = step_controller(state, 0.0, planner, program, ctx, cfg);
    CHECK(out.decision == SwitchDecision::Advance);
    CHECK(out.task_complete);
    CHECK(planner.next_calls == 0);
  }

  SECTION("advance resets stage state and consults the planner") {
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    step_controller(state, -0.2, planner, program, ctx, cfg);  // sets r_base
    state.reinforce_count = 2;
    const StepOutcome out = step_controller(state, 0.0, planner, program, ctx, cfg);
    CHECK(out.decision == SwitchDecision::Advance);
    CHECK_FALSE(out.task_complete);
    CHECK(state.stage == 2);
    CHECK(state.r_high == -0.1);
    CHECK(state.r_low == -0.9);
    CHECK_FALSE(state.r_base_set);
    CHECK(state.lambda == 0.5 * cfg.lambda_max);
    CHECK(state.reinforce_count == 0);
    CHECK(state.history.empty());
    CHECK(planner.next_calls == 1);
  }

  SECTION("planner may swap the program on advance") {
    RewardProgram program = two_stage_program();
    const char* swapped =
        "stage s1 { reward: a[0][0];  high: -0.05;  low: -0.5; }\n"
        "stage s2swap { reward: a[0][1] + 1.0;  high: -0.2;  low: -0.8; }\n";
    planner.next_reply_text = swapped;
    StageState state = make_stage_state(program, 1, cfg);
    step_controller(state, 0.0, planner, program, ctx, cfg);
    CHECK(program.stages[1].name == "s2swap");
    CHECK(state.r_high == -0.2);
  }

  SECTION("a swapped program missing the requested stage is an error") {
    RewardProgram program = two_stage_program();
    const char* shorter = "stage s1 { reward: a[0][0];  high: -0.05;  low: -0.5; }\n";
    planner.next_reply_text = shorter;
    StageState state = make_stage_state(program, 1, cfg);
    CHECK_THROWS_AS(step_controller(state, 0.0, planner, program, ctx, cfg), PlanningError);
  }

  SECTION("maintain with improving rewards never raises guidance") {
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    double prev = cfg.lambda_max;
    for (double r : {-0.4, -0.3, -0.2, -0.1}) {
      const StepOutcome out = step_controller(state, r, planner, program, ctx, cfg);
      CHECK(out.decision == SwitchDecision::Maintain);
      CHECK(state.lambda <= prev + 1e-15);
      prev = state.lambda;
    }
    CHECK(state.r_base == -0.4);
  }

  SECTION("reinforce escalates lambda with a hard clamp") {
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    CHECK(state.lambda == 0.5);
    StepOutcome out = step_controller(state, -0.9, planner, program, ctx, cfg);
    CHECK(out.decision == SwitchDecision::Reinforce);
    CHECK(state.lambda == Catch::Approx(0.75));
    CHECK(state.reinforce_count == 1);
    step_controller(state, -0.9, planner, program, ctx, cfg);
    CHECK(state.lambda == 1.0);  // 1.125 clamped
    step_controller(state, -0.9, planner, program, ctx, cfg);
    CHECK(state.lambda == 1.0);  // stays at the ceiling
    CHECK(state.reinforce_count == 3);
    CHECK(planner.recover_calls == 0);
  }

  SECTION("retry exhaustion restarts the stage via the planner") {
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    step_controller(state, -0.3, planner, program, ctx, cfg);  // r_base
    StepOutcome out;
    for (int i = 0; i < 4; ++i) out = step_controller(state, -0.9, planner, program, ctx, cfg);
    CHECK(planner.recover_calls == 1);
    CHECK(out.stage_restarted);
    CHECK(state.stage == 1);
    CHECK_FALSE(state.r_base_set);
    CHECK(state.reinforce_count == 0);
    CHECK(state.lambda == 0.5 * cfg.lambda_max);
    CHECK(state.history.empty());
  }

  SECTION("planner may abort instead of restarting") {
    planner.recover_reply = RecoveryAction::Abort;
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    StepOutcome out;
    for (int i = 0; i < 4; ++i) out = step_controller(state, -0.9, planner, program, ctx, cfg);
    CHECK(out.aborted);
    CHECK(planner.recover_calls == 1);
  }

  SECTION("non-finite reward is rejected") {
    RewardProgram program = two_stage_program();
    StageState state = make_stage_state(program, 1, cfg);
    CHECK_THROWS_AS(
        step_controller(state, std::nan(""), planner, program, ctx, cfg),
        std::invalid_argument);
  }
}

TEST_CASE("scripted planner emits the shipped task templates", "[control]") {
  ScriptedPlanner planner;

  SECTION("move-cube is a three-stage reach/grasp/place program") {
    PlanContext ctx = cube_context();
    RewardProgram prog = planner.plan(ctx);
    REQUIRE(prog.stage_count() == 3);
    CHECK(prog.stages[0].name == "reach");
    CHECK(prog.stages[1].name == "grasp");
    CHECK(prog.stages[2].name == "place");
    CHECK(prog.stages[0].r_high == -0.06);
    CHECK(prog.stages[1].r_high == -0.03);
    CHECK(prog.stages[2].r_high == -0.05);
    for (const auto& st : prog.stages) CHECK(st.r_low == -0.5);

    // identical context gives a structurally identical program
    CHECK(program_equal(prog, planner.plan(ctx)));

    // wire the template through the evaluator: a zero chunk leaves the
    // gripper at grip_start, so stage 1 reward is minus that distance
    const double r =
        eval_reward(prog, 1, ActionChunk(8, 3, 0.0), ctx.keypoints, {0.5, 0.1});
    const double dx = 0.5 - 0.3, dy = 0.1 - 0.45;
    CHECK(r == Catch::Approx(-std::sqrt(dx * dx + dy * dy)).epsilon(1e-12));
  }

  SECTION("articulated templates scale the actuate threshold with travel") {
    PlanContext ctx;
    ctx.task_family = "open-drawer";
    ctx.instruction = "open the drawer";
    ctx.keypoints.dim = 2;
    ctx.keypoints.labels = {"drawer", "drawer_goal"};
    ctx.keypoints.coords = {0.85, 0.5, 0.65, 0.5};  // travel 0.2
    ctx.dims = kPlanDims;
    RewardProgram prog = planner.plan(ctx);
    REQUIRE(prog.stage_count() == 2);
    CHECK(prog.stages[0].name == "reach");
    CHECK(prog.stages[1].name == "actuate");
    CHECK(prog.stages[0].r_high == -0.035);
    CHECK(prog.stages[1].r_high == Catch::Approx(-0.03).epsilon(1e-12));

    // short-throw parts keep a minimum slack
    ctx.keypoints.coords = {0.3, 0.85, 0.3, 0.84};  // travel 0.01
    RewardProgram tight = planner.plan(ctx);
    CHECK(tight.stages[1].r_high == Catch::Approx(-0.012).epsilon(1e-12));
  }

  SECTION("unknown family and malformed contexts are planning errors") {
    PlanContext ctx = cube_context();
    ctx.task_family = "juggle";
    CHECK_THROWS_AS(planner.plan(ctx), PlanningError);

    ctx = cube_context();
    ctx.keypoints.labels = {"red"};
    ctx.keypoints.coords = {0.3, 0.45};
    CHECK_THROWS_AS(planner.plan(ctx), PlanningError);

    ctx = cube_context();
    ctx.dims.n = 5;
    CHECK_THROWS_AS(planner.plan(ctx), PlanningError);
  }

  SECTION("recovery always restarts the stage") {
    PlanContext ctx = cube_context();
    CHECK(planner.recover(ctx, 2, {}) == RecoveryAction::RestartStage);
    CHECK_FALSE(planner.next_stage(ctx, 2, {}).has_value());
  }
}
