#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerkit/reward.hpp"

namespace steerkit {

enum class SwitchDecision { Advance, Maintain, Reinforce };

inline const char* switch_decision_name(SwitchDecision d) {
  switch (d) {
    case SwitchDecision::Advance: return "advance";
    case SwitchDecision::Maintain: return "maintain";
    case SwitchDecision::Reinforce: return "reinforce";
  }
  return "?";
}

// Guidance strength from reward feedback, literal form:
//   lambda = lambda_max * sigmoid(1 - R_t / R_base)
// The ratio form misbehaves for distance-style rewards (negative, rising
// toward zero): the ratio shrinks as execution improves, which *raises*
// guidance. Kept as the formula reference; the runtime default is the
// anchored form below.
inline double adaptive_lambda(double r_t, double r_base, double lambda_max) {
  if (!(lambda_max > 0.0)) throw std::invalid_argument("adaptive_lambda: lambda_max must be > 0");
  if (std::abs(r_base) < 1e-6) return 0.5 * lambda_max;
  const double x = 1.0 - r_t / r_base;
  return lambda_max / (1.0 + std::exp(-x));
}

// Anchored form: progress is measured against the stage's floor, so the
// ratio rho = (R_t - R_low) / (R_base - R_low) grows as the reward rises
// regardless of sign, and guidance decays with progress. rho is clamped to
// [0, 2], bounding the output to [sigmoid(-1), sigmoid(1)] * lambda_max.
inline double adaptive_lambda_anchored(double r_t, double r_base, double r_low,
                                       double lambda_max) {
  if (!(lambda_max > 0.0))
    throw std::invalid_argument("adaptive_lambda_anchored: lambda_max must be > 0");
  const double denom = r_base - r_low;
  if (std::abs(denom) < 1e-6) return 0.5 * lambda_max;
  const double rho = std::clamp((r_t - r_low) / denom, 0.0, 2.0);
  return lambda_max / (1.0 + std::exp(-(1.0 - rho)));
}

// Two-threshold hysteresis rule. The three cases partition the line:
// above R_high advance, below R_low reinforce, otherwise hold.
inline SwitchDecision schmitt_decide(double r_t, double r_high, double r_low) {
  if (!(r_high > r_low)) throw std::invalid_argument("schmitt_decide: requires R_high > R_low");
  if (r_t > r_high) return SwitchDecision::Advance;
  if (r_t < r_low) return SwitchDecision::Reinforce;
  return SwitchDecision::Maintain;
}

struct ControllerConfig {
  double lambda_max = 1.0;
  int retry_limit = 3;
  double reinforce_multiplier = 1.5;
  // false selects the literal ratio formula for lambda updates
  bool anchored_lambda = true;
};

inline void validate_controller_config(const ControllerConfig& c) {
  if (!(c.lambda_max > 0.0)) throw std::invalid_argument("controller: lambda_max must be > 0");
  if (c.retry_limit < 0) throw std::invalid_argument("controller: retry_limit must be >= 0");
  if (!(c.reinforce_multiplier >= 1.0))
    throw std::invalid_argument("controller: reinforce_multiplier must be >= 1");
}

// Per-stage controller state. r_base is the reward of the stage's first
// executed chunk and anchors the lambda schedule; lambda always starts a
// stage at the neutral point lambda_max / 2.
struct StageState {
  int stage = 1;  // 1-based
  double r_high = 0.0;
  double r_low = 0.0;
  double r_base = 0.0;
  bool r_base_set = false;
  double lambda = 0.5;
  int reinforce_count = 0;
  std::vector<double> history;
};

inline StageState make_stage_state(const RewardProgram& program, int stage,
                                   const ControllerConfig& cfg) {
  if (stage < 1 || stage > program.stage_count())
    throw std::out_of_range("make_stage_state: stage out of range");
  const RewardStage& st = program.stages[static_cast<std::size_t>(stage - 1)];
  StageState s;
  s.stage = stage;
  s.r_high = st.r_high;
  s.r_low = st.r_low;
  s.lambda = 0.5 * cfg.lambda_max;
  return s;
}

struct PlanContext {
  std::string task_family;
  std::string instruction;
  KeypointSet keypoints;
  RewardDims dims;
};

enum class RecoveryAction { RestartStage, Abort };

struct PlanningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Stage planner consulted when the controller crosses a threshold: once up
// front for the full program, on each Advance (which may swap in an updated
// program), and when a stage exhausts its retries.
class StagePlanner {
 public:
  virtual ~StagePlanner() = default;
  virtual RewardProgram plan(const PlanContext& ctx) = 0;
  virtual std::optional<RewardProgram> next_stage(const PlanContext& ctx, int next_stage,
                                                  const std::vector<double>& history) = 0;
  virtual RecoveryAction recover(const PlanContext& ctx, int stage,
                                 const std::vector<double>& history) = 0;
};

struct StepOutcome {
  SwitchDecision decision = SwitchDecision::Maintain;
  bool task_complete = false;
  bool aborted = false;
  bool stage_restarted = false;
};

// One controller transition after a chunk executes with final-step reward
// r_t. Mutates state (and possibly program, when the planner swaps it on
// advance) and reports what happened.
inline StepOutcome step_controller(StageState& state, double r_t, StagePlanner& planner,
                                   RewardProgram& program, const PlanContext& ctx,
                                   const ControllerConfig& cfg) {
  validate_controller_config(cfg);
  if (!std::isfinite(r_t)) throw std::invalid_argument("step_controller: non-finite reward");
  state.history.push_back(r_t);
  if (!state.r_base_set) {
    state.r_base = r_t;
    state.r_base_set = true;
  }

  StepOutcome out;
  out.decision = schmitt_decide(r_t, state.r_high, state.r_low);
  switch (out.decision) {
    case SwitchDecision::Advance: {
      if (state.stage >= program.stage_count()) {
        out.task_complete = true;
        return out;
      }
      const int next = state.stage + 1;
      if (auto updated = planner.next_stage(ctx, next, state.history)) {
        if (updated->stage_count() < next)
          throw PlanningError("planner returned a program without the requested stage");
        program = std::move(*updated);
      }
      state = make_stage_state(program, next, cfg);
      return out;
    }
    case SwitchDecision::Maintain: {
      state.lambda = cfg.anchored_lambda
                         ? adaptive_lambda_anchored(r_t, state.r_base, state.r_low, cfg.lambda_max)
                         : adaptive_lambda(r_t, state.r_base, cfg.lambda_max);
      return out;
    }
    case SwitchDecision::Reinforce: {
      state.lambda = std::min(state.lambda * cfg.reinforce_multiplier, cfg.lambda_max);
      state.reinforce_count += 1;
      if (state.reinforce_count > cfg.retry_limit) {
        const RecoveryAction act = planner.recover(ctx, state.stage, state.history);
        if (act == RecoveryAction::Abort) {
          out.aborted = true;
        } else {
          const int cur = state.stage;
          state = make_stage_state(program, cur, cfg);
          out.stage_restarted = true;
        }
      }
      return out;
    }
  }
  return out;  // unreachable
}

namespace control_detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace control_detail

// Template planner for the shipped task families. Keypoint convention
// (guaranteed by the simulator's grounding): p[0] is the manipulated
// object or handle, p[1] is the goal (zone center or handle travel end).
//
// move-cube: reach the object, close the gripper on it, carry it to the
// zone. articulated-*: reach the handle, then drag it to its travel end;
// the joint follows gripper motion along the axis, so a positional pull
// toward the end point actuates it. The actuate threshold scales with the
// part's travel so short-throw parts are not over-penalized.
class ScriptedPlanner : public StagePlanner {
 public:
  explicit ScriptedPlanner(double actuate_slack = 0.15) : actuate_slack_(actuate_slack) {}

  RewardProgram plan(const PlanContext& ctx) override {
    if (ctx.keypoints.size() < 2)
      throw PlanningError("scripted planner requires object and goal keypoints");
    const RewardDims& d = ctx.dims;
    if (d.n != ctx.keypoints.size())
      throw PlanningError("scripted planner: dims.n does not match keypoint count");
    std::string text;
    if (ctx.task_family == "move-cube") {
      text = move_cube_program(d);
    } else if (ctx.task_family == "open-drawer" || ctx.task_family == "close-drawer" ||
               ctx.task_family == "press-button" || ctx.task_family == "toggle-switch") {
      text = articulated_program(ctx, d);
    } else {
      throw PlanningError("scripted planner has no template for task family '" +
                          ctx.task_family + "'");
    }
    return parse_reward(text, d);
  }

  std::optional<RewardProgram> next_stage(const PlanContext&, int,
                                          const std::vector<double>&) override {
    return std::nullopt;  // the full program is planned up front
  }

  RecoveryAction recover(const PlanContext&, int, const std::vector<double>&) override {
    return RecoveryAction::RestartStage;
  }

 private:
  static std::string move_cube_program(const RewardDims& d) {
    const std::string end = "cum(a)[" + std::to_string(d.T - 1) + "][0:2]";
    std::string s;
    s += "stage reach {\n";
    s += "  desc: \"move the gripper to the object\";\n";
    s += "  reward: -norm2(" + end + " - p[0][0:2]);\n";
    s += "  high: -0.06;\n  low: -0.5;\n}\n";
    s += "stage grasp {\n";
    s += "  desc: \"close the gripper on the object\";\n";
    s += "  reward: -norm2(" + end + " - p[0][0:2]) + 0.05 * mean_t(tanh(2.0 * a[t][2]));\n";
    s += "  high: -0.03;\n  low: -0.5;\n}\n";
    s += "stage place {\n";
    s += "  desc: \"carry the object to the goal zone\";\n";
    s += "  reward: -norm2(" + end + " - p[1][0:2]) + 0.05 * mean_t(tanh(2.0 * a[t][2]));\n";
    s += "  high: -0.05;\n  low: -0.5;\n}\n";
    return s;
  }

  std::string articulated_program(const PlanContext& ctx, const RewardDims& d) const {
    // travel distance comes from the grounded keypoints: |p[1] - p[0]| at
    // plan time is the remaining handle throw
    double travel = 0.0;
    for (int c = 0; c < ctx.keypoints.dim; ++c) {
      const double diff = ctx.keypoints.at(1, c) - ctx.keypoints.at(0, c);
      travel += diff * diff;
    }
    travel = std::sqrt(travel);
    const double actuate_high = -std::max(actuate_slack_ * travel, 0.012);
    const std::string end = "cum(a)[" + std::to_string(d.T - 1) + "][0:2]";
    std::string s;
    s += "stage reach {\n";
    s += "  desc: \"move the gripper to the handle\";\n";
    s += "  reward: -norm2(" + end + " - p[0][0:2]);\n";
    s += "  high: -0.035;\n  low: -0.5;\n}\n";
    s += "stage actuate {\n";
    s += "  desc: \"drag the handle to the end of its travel\";\n";
    s += "  reward: -norm2(" + end + " - p[1][0:2]);\n";
    s += "  high: " + control_detail::fmt(actuate_high) + ";\n  low: -0.5;\n}\n";
    return s;
  }

  double actuate_slack_;
};

}  // namespace steerkit
