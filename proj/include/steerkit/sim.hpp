#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerkit/chunk.hpp"
#include "steerkit/reward_ast.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

// Workspace is the unit square. These constants are shared by the
// kinematics, the scripted expert, and the task thresholds; changing one
// without the others breaks the calibration.
inline constexpr double kGraspRadius = 0.05;
inline constexpr double kHandleRadius = 0.05;
inline constexpr double kDeltaClamp = 0.1;

struct SimObject {
  std::string id;
  std::string label;
  double x = 0.0, y = 0.0;
  bool movable = true;
};

// 1-DOF prismatic part: the handle sits at handle0 + axis * joint * travel.
struct ArticulatedPart {
  std::string id;
  std::string label;
  double joint = 0.0;  // in [0,1]
  double axis_x = 0.0, axis_y = 0.0;
  double handle0_x = 0.0, handle0_y = 0.0;
  double travel = 0.0;

  double handle_x() const { return handle0_x + axis_x * joint * travel; }
  double handle_y() const { return handle0_y + axis_y * joint * travel; }
};

struct Zone {
  std::string label;
  double cx = 0.0, cy = 0.0;
  double radius = 0.0;
};

struct Gripper {
  double x = 0.5, y = 0.5;
  bool closed = false;
  std::string held;  // object id, empty when nothing is grasped
};

struct Scene {
  std::vector<SimObject> objects;
  std::vector<ArticulatedPart> parts;
  std::vector<Zone> zones;
  Gripper gripper;
  double xmin = 0.0, ymin = 0.0, xmax = 1.0, ymax = 1.0;
};

struct SceneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace sim_detail {

inline bool in_bounds(const Scene& s, double x, double y) {
  return x >= s.xmin && x <= s.xmax && y >= s.ymin && y <= s.ymax;
}

inline double clamp_delta(double d) { return std::clamp(d, -kDeltaClamp, kDeltaClamp); }

inline double dist2d(double ax, double ay, double bx, double by) {
  const double dx = ax - bx, dy = ay - by;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace sim_detail

inline void validate_scene(const Scene& s) {
  if (!(s.xmax > s.xmin) || !(s.ymax > s.ymin))
    throw SceneError("scene: bounds must span a nonempty rectangle");
  for (const auto& o : s.objects) {
    if (o.id.empty()) throw SceneError("scene: object with empty id");
    if (!sim_detail::in_bounds(s, o.x, o.y))
      throw SceneError("scene: object '" + o.id + "' outside bounds");
  }
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    for (std::size_t j = i + 1; j < s.objects.size(); ++j)
      if (s.objects[i].id == s.objects[j].id)
        throw SceneError("scene: duplicate object id '" + s.objects[i].id + "'");
  for (const auto& p : s.parts) {
    if (p.id.empty()) throw SceneError("scene: part with empty id");
    if (p.joint < 0.0 || p.joint > 1.0)
      throw SceneError("scene: part '" + p.id + "' joint outside [0,1]");
    const double norm = std::sqrt(p.axis_x * p.axis_x + p.axis_y * p.axis_y);
    if (std::abs(norm - 1.0) > 1e-9)
      throw SceneError("scene: part '" + p.id + "' axis must be unit length");
    if (!(p.travel > 0.0)) throw SceneError("scene: part '" + p.id + "' travel must be > 0");
    if (!sim_detail::in_bounds(s, p.handle0_x, p.handle0_y) ||
        !sim_detail::in_bounds(s, p.handle0_x + p.axis_x * p.travel,
                               p.handle0_y + p.axis_y * p.travel))
      throw SceneError("scene: part '" + p.id + "' handle travel leaves bounds");
  }
  for (const auto& z : s.zones) {
    if (!(z.radius > 0.0)) throw SceneError("scene: zone '" + z.label + "' radius must be > 0");
    if (!sim_detail::in_bounds(s, z.cx, z.cy))
      throw SceneError("scene: zone '" + z.label + "' center outside bounds");
  }
  if (!sim_detail::in_bounds(s, s.gripper.x, s.gripper.y))
    throw SceneError("scene: gripper outside bounds");
  if (!s.gripper.held.empty()) {
    bool found = false;
    for (const auto& o : s.objects)
      if (o.id == s.gripper.held) {
        if (!o.movable) throw SceneError("scene: held object is not movable");
        found = true;
      }
    if (!found) throw SceneError("scene: held object id '" + s.gripper.held + "' not present");
    if (!s.gripper.closed) throw SceneError("scene: held object requires a closed gripper");
  }
}

// One kinematic step for a single action row (dx, dy, grip[, ...]).
// Order: clamp deltas; actuate any joint whose handle is within reach of
// the *pre-move* gripper by the motion component along its axis; move the
// gripper (clamped to bounds); carry the held object; then apply the grip
// channel — above +0.5 closes and grasps the nearest movable object within
// grasp radius, below -0.5 opens and releases. Physics is total: any
// finite action is legal.
inline void step_env(Scene& s, const double* action, int dim) {
  if (dim < 3) throw std::invalid_argument("step_env: action dim must be >= 3");
  for (int i = 0; i < dim; ++i)
    if (!std::isfinite(action[i])) throw std::invalid_argument("step_env: non-finite action");
  const double dx = sim_detail::clamp_delta(action[0]);
  const double dy = sim_detail::clamp_delta(action[1]);
  const double grip = action[dim - 1];

  for (auto& p : s.parts) {
    const double reach =
        sim_detail::dist2d(s.gripper.x, s.gripper.y, p.handle_x(), p.handle_y());
    if (reach <= kHandleRadius) {
      const double along = dx * p.axis_x + dy * p.axis_y;
      p.joint = std::clamp(p.joint + along / p.travel, 0.0, 1.0);
    }
  }

  s.gripper.x = std::clamp(s.gripper.x + dx, s.xmin, s.xmax);
  s.gripper.y = std::clamp(s.gripper.y + dy, s.ymin, s.ymax);

  if (!s.gripper.held.empty()) {
    for (auto& o : s.objects)
      if (o.id == s.gripper.held) {
        o.x = s.gripper.x;
        o.y = s.gripper.y;
      }
  }

  if (grip > 0.5) {
    if (!s.gripper.closed) {
      s.gripper.closed = true;
      double best = kGraspRadius;
      const SimObject* pick = nullptr;
      for (const auto& o : s.objects) {
        if (!o.movable) continue;
        const double d = sim_detail::dist2d(s.gripper.x, s.gripper.y, o.x, o.y);
        if (d <= best) {
          best = d;
          pick = &o;
        }
      }
      if (pick) {
        s.gripper.held = pick->id;
        for (auto& o : s.objects)
          if (o.id == pick->id) {
            o.x = s.gripper.x;
            o.y = s.gripper.y;
          }
      }
    }
  } else if (grip < -0.5) {
    s.gripper.closed = false;
    s.gripper.held.clear();
  }
}

// Folds step_env over the chunk's T rows. When trace is given, the
// gripper position after each step is appended (one point per step).
inline void execute_chunk(Scene& s, const ActionChunk& chunk,
                          std::vector<std::array<double, 2>>* trace = nullptr) {
  for (int t = 0; t < chunk.T; ++t) {
    step_env(s, &chunk.v[static_cast<std::size_t>(t) * chunk.D], chunk.D);
    if (trace) trace->push_back({s.gripper.x, s.gripper.y});
  }
}

// ---------------------------------------------------------------------------
// tasks

struct SuccessPredicate {
  enum class Kind { ObjectInZone, JointAbove, JointBelow } kind = Kind::ObjectInZone;
  std::string subject;  // object label or part label
  std::string zone;     // ObjectInZone only
  double threshold = 0.0;  // joint predicates only
};

struct TaskSpec {
  std::string family;       // "move-cube", "open-drawer", "close-drawer",
                            // "press-button", "toggle-switch"
  std::string instruction;
  std::string object_label;  // manipulated object or part
  std::string goal_label;    // zone label ("" for articulated families)
  SuccessPredicate predicate;
};

struct GroundingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace sim_detail {

inline const SimObject* find_object(const Scene& s, const std::string& label) {
  for (const auto& o : s.objects)
    if (o.label == label) return &o;
  return nullptr;
}

inline const ArticulatedPart* find_part(const Scene& s, const std::string& label) {
  for (const auto& p : s.parts)
    if (p.label == label) return &p;
  return nullptr;
}

inline const Zone* find_zone(const Scene& s, const std::string& label) {
  for (const auto& z : s.zones)
    if (z.label == label) return &z;
  return nullptr;
}

inline bool joint_goal_is_open(const TaskSpec& task) {
  return task.predicate.kind == SuccessPredicate::Kind::JointAbove;
}

}  // namespace sim_detail

// Oracle grounding: keypoints are copied from the live scene, so they must
// be recomputed after every perturbation and between chunks. Convention
// consumed by the planner templates: p[0] is the manipulated object or the
// part's current handle, p[1] is the goal — the zone center, or the handle
// position at the commanded end of travel (labeled "<part>_goal").
inline KeypointSet ground_keypoints(const Scene& scene, const TaskSpec& task) {
  KeypointSet ks;
  ks.dim = 2;
  if (task.predicate.kind == SuccessPredicate::Kind::ObjectInZone) {
    const SimObject* obj = sim_detail::find_object(scene, task.object_label);
    if (!obj) throw GroundingError("grounding: no object labeled '" + task.object_label + "'");
    const Zone* zone = sim_detail::find_zone(scene, task.goal_label);
    if (!zone) throw GroundingError("grounding: no zone labeled '" + task.goal_label + "'");
    ks.labels = {obj->label, zone->label};
    ks.coords = {obj->x, obj->y, zone->cx, zone->cy};
  } else {
    const ArticulatedPart* part = sim_detail::find_part(scene, task.object_label);
    if (!part) throw GroundingError("grounding: no part labeled '" + task.object_label + "'");
    const double goal_joint = sim_detail::joint_goal_is_open(task) ? 1.0 : 0.0;
    const double gx = part->handle0_x + part->axis_x * goal_joint * part->travel;
    const double gy = part->handle0_y + part->axis_y * goal_joint * part->travel;
    ks.labels = {part->label, part->label + "_goal"};
    ks.coords = {part->handle_x(), part->handle_y(), gx, gy};
  }
  return ks;
}

inline bool check_success(const Scene& scene, const TaskSpec& task) {
  switch (task.predicate.kind) {
    case SuccessPredicate::Kind::ObjectInZone: {
      const SimObject* obj = sim_detail::find_object(scene, task.predicate.subject);
      const Zone* zone = sim_detail::find_zone(scene, task.predicate.zone);
      if (!obj || !zone) return false;
      // closed ball: the boundary counts
      return sim_detail::dist2d(obj->x, obj->y, zone->cx, zone->cy) <= zone->radius;
    }
    case SuccessPredicate::Kind::JointAbove: {
      const ArticulatedPart* p = sim_detail::find_part(scene, task.predicate.subject);
      return p && p->joint >= task.predicate.threshold;
    }
    case SuccessPredicate::Kind::JointBelow: {
      const ArticulatedPart* p = sim_detail::find_part(scene, task.predicate.subject);
      return p && p->joint <= task.predicate.threshold;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// shipped scenes and tasks

// Movable-object tabletop: three cubes, two target zones, gripper parked
// low-center.
inline Scene nominal_cube_scene() {
  Scene s;
  s.objects = {{"red", "red", 0.3, 0.45, true},
               {"blue", "blue", 0.7, 0.45, true},
               {"pink", "pink", 0.5, 0.62, true}};
  s.zones = {{"green_zone", 0.8, 0.8, 0.08}, {"yellow_zone", 0.2, 0.8, 0.08}};
  s.gripper = {0.5, 0.1, false, ""};
  return s;
}

// Articulated wall: drawer pulls left, button presses down, switch slides
// right; gripper parked low-center.
inline Scene nominal_articulated_scene() {
  Scene s;
  s.parts = {{"drawer", "drawer", 0.0, -1.0, 0.0, 0.85, 0.5, 0.2},
             {"button", "button", 0.0, 0.0, -1.0, 0.3, 0.85, 0.1},
             {"switch", "switch", 0.0, 1.0, 0.0, 0.5, 0.85, 0.1}};
  s.gripper = {0.5, 0.2, false, ""};
  return s;
}

inline Scene nominal_scene(const std::string& family) {
  if (family == "move-cube") return nominal_cube_scene();
  if (family == "open-drawer" || family == "close-drawer" || family == "press-button" ||
      family == "toggle-switch")
    return nominal_articulated_scene();
  throw std::invalid_argument("nominal_scene: unknown task family '" + family + "'");
}

inline TaskSpec make_task(const std::string& family) {
  TaskSpec t;
  t.family = family;
  if (family == "move-cube") {
    t.instruction = "move the red cube to the green zone";
    t.object_label = "red";
    t.goal_label = "green_zone";
    t.predicate = {SuccessPredicate::Kind::ObjectInZone, "red", "green_zone", 0.0};
  } else if (family == "open-drawer") {
    t.instruction = "pull the drawer all the way open";
    t.object_label = "drawer";
    t.predicate = {SuccessPredicate::Kind::JointAbove, "drawer", "", 0.8};
  } else if (family == "close-drawer") {
    t.instruction = "push the drawer closed";
    t.object_label = "drawer";
    t.predicate = {SuccessPredicate::Kind::JointBelow, "drawer", "", 0.2};
  } else if (family == "press-button") {
    t.instruction = "press the button";
    t.object_label = "button";
    t.predicate = {SuccessPredicate::Kind::JointAbove, "button", "", 0.8};
  } else if (family == "toggle-switch") {
    t.instruction = "flip the switch";
    t.object_label = "switch";
    t.predicate = {SuccessPredicate::Kind::JointAbove, "switch", "", 0.8};
  } else {
    throw std::invalid_argument("make_task: unknown task family '" + family + "'");
  }
  return t;
}

// close-drawer starts from an open drawer
inline Scene nominal_task_scene(const TaskSpec& task) {
  Scene s = nominal_scene(task.family);
  if (task.family == "close-drawer")
    for (auto& p : s.parts)
      if (p.label == "drawer") p.joint = 1.0;
  return s;
}

// ---------------------------------------------------------------------------
// perturbations

struct PerturbationSpec {
  enum class Kind {
    None,
    PositionShift,
    ObjectSubstitute,
    DistractorInsert,
    InstructionChange
  } kind = Kind::None;
  // position_shift: displacement magnitude drawn uniformly from this range
  double shift_min = 0.08, shift_max = 0.18;
  // object_substitute
  std::string old_label, new_label;
  // distractor_insert
  int count = 0;
  // instruction_change: retarget to these labels (empty keeps the old one)
  std::string new_object_label, new_goal_label;
  // mixed into the episode stream by the harness; apply_perturbation itself
  // consumes the rng argument
  std::uint64_t seed = 0;
};

inline const char* perturbation_name(PerturbationSpec::Kind k) {
  switch (k) {
    case PerturbationSpec::Kind::None: return "none";
    case PerturbationSpec::Kind::PositionShift: return "position_shift";
    case PerturbationSpec::Kind::ObjectSubstitute: return "object_substitute";
    case PerturbationSpec::Kind::DistractorInsert: return "distractor_insert";
    case PerturbationSpec::Kind::InstructionChange: return "instruction_change";
  }
  return "?";
}

struct PerturbationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace sim_detail {

// uniform direction, magnitude in [lo, hi], rejected until the point stays
// in bounds
inline void shift_point(const Scene& s, double& x, double& y, double lo, double hi, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double ang = 2.0 * 3.14159265358979323846 * rng.uniform01();
    const double mag = lo + (hi - lo) * rng.uniform01();
    const double nx = x + mag * std::cos(ang);
    const double ny = y + mag * std::sin(ang);
    if (in_bounds(s, nx, ny)) {
      x = nx;
      y = ny;
      return;
    }
  }
  throw PerturbationError("position_shift: no in-bounds placement after 100 attempts");
}

inline std::string rebuild_instruction(const TaskSpec& t) {
  if (t.family == "move-cube")
    return "move the " + t.object_label + " cube to the " + t.goal_label;
  return t.instruction;
}

}  // namespace sim_detail

// Deterministic given the rng state. position_shift displaces the
// task-referenced object (or part handle base); object_substitute relabels
// it (task references follow); distractor_insert adds unreferenced movable
// objects away from everything; instruction_change retargets the task,
// leaving the scene alone.
inline void apply_perturbation(Scene& scene, TaskSpec& task, const PerturbationSpec& spec,
                               Rng& rng) {
  switch (spec.kind) {
    case PerturbationSpec::Kind::None:
      return;
    case PerturbationSpec::Kind::PositionShift: {
      if (spec.shift_min < 0.0 || spec.shift_max < spec.shift_min)
        throw PerturbationError("position_shift: invalid magnitude range");
      bool moved = false;
      for (auto& o : scene.objects)
        if (o.label == task.object_label) {
          sim_detail::shift_point(scene, o.x, o.y, spec.shift_min, spec.shift_max, rng);
          moved = true;
        }
      for (auto& p : scene.parts)
        if (p.label == task.object_label) {
          double hx = p.handle0_x, hy = p.handle0_y;
          // the whole travel segment must stay in bounds
          for (int attempt = 0; attempt < 100; ++attempt) {
            double nx = hx, ny = hy;
            sim_detail::shift_point(scene, nx, ny, spec.shift_min, spec.shift_max, rng);
            if (sim_detail::in_bounds(scene, nx + p.axis_x * p.travel,
                                      ny + p.axis_y * p.travel)) {
              p.handle0_x = nx;
              p.handle0_y = ny;
              moved = true;
              break;
            }
          }
          if (!moved)
            throw PerturbationError("position_shift: no in-bounds handle placement");
        }
      if (!moved)
        throw PerturbationError("position_shift: task references nothing movable in the scene");
      return;
    }
    case PerturbationSpec::Kind::ObjectSubstitute: {
      SimObject* hit = nullptr;
      for (auto& o : scene.objects)
        if (o.label == spec.old_label) hit = &o;
      if (!hit) throw PerturbationError("object_substitute: no object labeled '" +
                                        spec.old_label + "'");
      if (spec.new_label.empty())
        throw PerturbationError("object_substitute: new label must be nonempty");
      hit->label = spec.new_label;
      if (task.object_label == spec.old_label) {
        task.object_label = spec.new_label;
        if (task.predicate.subject == spec.old_label) task.predicate.subject = spec.new_label;
        task.instruction = sim_detail::rebuild_instruction(task);
      }
      return;
    }
    case PerturbationSpec::Kind::DistractorInsert: {
      if (spec.count < 0) throw PerturbationError("distractor_insert: negative count");
      for (int k = 0; k < spec.count; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
          const double x = scene.xmin + (scene.xmax - scene.xmin) * rng.uniform01();
          const double y = scene.ymin + (scene.ymax - scene.ymin) * rng.uniform01();
          bool clear = sim_detail::dist2d(x, y, scene.gripper.x, scene.gripper.y) >= 0.08;
          for (const auto& o : scene.objects)
            clear = clear && sim_detail::dist2d(x, y, o.x, o.y) >= 0.08;
          for (const auto& z : scene.zones)
            clear = clear && sim_detail::dist2d(x, y, z.cx, z.cy) >= z.radius + 0.08;
          for (const auto& p : scene.parts)
            clear = clear && sim_detail::dist2d(x, y, p.handle_x(), p.handle_y()) >= 0.08;
          if (clear) {
            const std::string id = "distractor_" + std::to_string(scene.objects.size());
            scene.objects.push_back({id, id, x, y, true});
            placed = true;
          }
        }
        if (!placed)
          throw PerturbationError("distractor_insert: no clear placement after 100 attempts");
      }
      return;
    }
    case PerturbationSpec::Kind::InstructionChange: {
      // Labels are taken on faith here; a retarget to something the scene
      // does not carry surfaces as a GroundingError when the keypoints are
      // next resolved, which is where every other stale reference fails too.
      if (!spec.new_object_label.empty()) {
        task.object_label = spec.new_object_label;
        task.predicate.subject = spec.new_object_label;
      }
      if (!spec.new_goal_label.empty()) {
        task.goal_label = spec.new_goal_label;
        task.predicate.zone = spec.new_goal_label;
      }
      task.instruction = sim_detail::rebuild_instruction(task);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// scripted expert and demonstrations

namespace sim_detail {

// straight-line waypoint chunk: T rows moving from (fx,fy) toward (tx,ty)
// at most kDeltaClamp per step, grip channel held constant
inline ActionChunk line_chunk(int T, int D, double fx, double fy, double tx, double ty,
                              double grip) {
  ActionChunk c(T, D, 0.0);
  double x = fx, y = fy;
  for (int t = 0; t < T; ++t) {
    const double dx = tx - x, dy = ty - y;
    const double d = std::sqrt(dx * dx + dy * dy);
    if (d > 1e-12) {
      const double scale = std::min(1.0, kDeltaClamp / d);
      c.at(t, 0) = dx * scale;
      c.at(t, 1) = dy * scale;
      x += c.at(t, 0);
      y += c.at(t, 1);
    }
    c.at(t, D - 1) = grip;
  }
  return c;
}

}  // namespace sim_detail

// Per-stage expert chunk for the live scene. Stages index the shipped
// templates: move-cube {1 reach, 2 grasp, 3 place}, articulated {1 reach,
// 2 actuate}.
inline ActionChunk expert_chunk(const Scene& scene, const TaskSpec& task, int stage, int T,
                                int D) {
  if (D < 3) throw std::invalid_argument("expert_chunk: D must be >= 3");
  const double gx = scene.gripper.x, gy = scene.gripper.y;
  if (task.predicate.kind == SuccessPredicate::Kind::ObjectInZone) {
    const SimObject* obj = sim_detail::find_object(scene, task.object_label);
    const Zone* zone = sim_detail::find_zone(scene, task.goal_label);
    if (!obj || !zone) throw GroundingError("expert_chunk: task references missing labels");
    switch (stage) {
      case 1: return sim_detail::line_chunk(T, D, gx, gy, obj->x, obj->y, -1.0);
      case 2: {
        // re-approach open for a couple of rows, then clamp shut: tolerates
        // a reach that landed slightly off the object
        const int approach = std::min(std::max(T / 4, 1), std::max(T - 2, 0));
        ActionChunk c = sim_detail::line_chunk(T, D, gx, gy, obj->x, obj->y, -1.0);
        for (int t = approach; t < T; ++t) c.at(t, D - 1) = 1.0;
        return c;
      }
      case 3: return sim_detail::line_chunk(T, D, gx, gy, zone->cx, zone->cy, 1.0);
      default: throw std::invalid_argument("expert_chunk: move-cube has stages 1..3");
    }
  }
  const ArticulatedPart* part = sim_detail::find_part(scene, task.object_label);
  if (!part) throw GroundingError("expert_chunk: task references missing part");
  const double dir = sim_detail::joint_goal_is_open(task) ? 1.0 : -1.0;
  switch (stage) {
    case 1: return sim_detail::line_chunk(T, D, gx, gy, part->handle_x(), part->handle_y(), -1.0);
    case 2: {
      // re-approach the live handle, then push-and-hold into the joint stop
      // so trailing rows keep the articulation pinned instead of drifting
      const int approach = std::min(std::max(T / 4, 1), std::max(T - 2, 0));
      ActionChunk c =
          sim_detail::line_chunk(T, D, gx, gy, part->handle_x(), part->handle_y(), -1.0);
      for (int t = approach; t < T; ++t) {
        c.at(t, 0) = dir * part->axis_x * kDeltaClamp;
        c.at(t, 1) = dir * part->axis_y * kDeltaClamp;
      }
      return c;
    }
    default: throw std::invalid_argument("expert_chunk: articulated tasks have stages 1..2");
  }
}

inline int stage_count_for_family(const std::string& family) {
  return family == "move-cube" ? 3 : 2;
}

struct DemoGenError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// N expert episodes from the task's nominal scene, one chunk per stage,
// with Gaussian noise on the positional deltas for diversity. Every
// returned episode has been executed and passed check_success; the expert
// failing more than half its attempts aborts generation.
inline std::vector<std::vector<ActionChunk>> generate_demos(const TaskSpec& task, int n_demos,
                                                            int T, int D, double noise_scale,
                                                            Rng& rng) {
  if (n_demos <= 0) throw std::invalid_argument("generate_demos: n_demos must be > 0");
  if (noise_scale < 0.0) throw std::invalid_argument("generate_demos: negative noise_scale");
  const int stages = stage_count_for_family(task.family);
  std::vector<std::vector<ActionChunk>> demos;
  int attempts = 0;
  while (static_cast<int>(demos.size()) < n_demos) {
    ++attempts;
    if (attempts > 2 * n_demos && static_cast<int>(demos.size()) * 2 < attempts)
      throw DemoGenError("generate_demos: expert failed more than half of " +
                         std::to_string(attempts) + " attempts");
    Scene scene = nominal_task_scene(task);
    std::vector<ActionChunk> episode;
    for (int st = 1; st <= stages; ++st) {
      ActionChunk c = expert_chunk(scene, task, st, T, D);
      for (int t = 0; t < T; ++t)
        for (int d = 0; d < 2; ++d) c.at(t, d) += noise_scale * rng.normal();
      execute_chunk(scene, c);
      episode.push_back(std::move(c));
    }
    if (check_success(scene, task)) demos.push_back(std::move(episode));
  }
  return demos;
}

// ---------------------------------------------------------------------------
// episode bookkeeping (shared by the harness and its tests)

struct ChunkTrace {
  int stage = 1;
  double lambda = 0.0;
  double reward = 0.0;
};

struct EpisodeResult {
  bool success = false;
  int chunks = 0;
  int final_stage = 1;
  std::vector<ChunkTrace> trace;
  std::string failure_reason;  // "", "budget", "aborted", "planning", "grounding", "perturbation"
  std::vector<std::array<double, 2>> gripper_path;

  double mean_lambda() const {
    if (trace.empty()) return 0.0;
    double s = 0.0;
    for (const auto& c : trace) s += c.lambda;
    return s / static_cast<double>(trace.size());
  }
};

}  // namespace steerkit
