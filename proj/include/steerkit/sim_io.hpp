#pragma once

#include <string>

#include <json.hpp>

#include "steerkit/sim.hpp"

namespace steerkit {

struct DocumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace sim_io_detail {

using nlohmann::json;

inline double num_at(const json& j, const std::string& path) {
  if (!j.is_number()) throw DocumentError("schema violation at " + path + ": expected number");
  return j.get<double>();
}

inline std::string str_at(const json& j, const std::string& path) {
  if (!j.is_string()) throw DocumentError("schema violation at " + path + ": expected string");
  return j.get<std::string>();
}

inline const json& field(const json& j, const char* key, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) throw DocumentError("schema violation at " + path + ": missing '" + key + "'");
  return *it;
}

inline void read_pair(const json& j, const std::string& path, double& x, double& y) {
  if (!j.is_array() || j.size() != 2)
    throw DocumentError("schema violation at " + path + ": expected [x, y]");
  x = num_at(j[0], path + "[0]");
  y = num_at(j[1], path + "[1]");
}

}  // namespace sim_io_detail

inline nlohmann::json save_scene(const Scene& s) {
  using nlohmann::json;
  json j;
  j["bounds"] = {s.xmin, s.ymin, s.xmax, s.ymax};
  j["objects"] = json::array();
  for (const auto& o : s.objects)
    j["objects"].push_back(
        {{"id", o.id}, {"label", o.label}, {"pos", {o.x, o.y}}, {"movable", o.movable}});
  j["parts"] = json::array();
  for (const auto& p : s.parts)
    j["parts"].push_back({{"id", p.id},
                          {"label", p.label},
                          {"joint", p.joint},
                          {"axis", {p.axis_x, p.axis_y}},
                          {"handle", {p.handle0_x, p.handle0_y}},
                          {"travel", p.travel}});
  j["zones"] = json::array();
  for (const auto& z : s.zones)
    j["zones"].push_back({{"label", z.label}, {"center", {z.cx, z.cy}}, {"radius", z.radius}});
  j["gripper"] = {{"pos", {s.gripper.x, s.gripper.y}},
                  {"closed", s.gripper.closed},
                  {"held", s.gripper.held}};
  return j;
}

inline Scene load_scene(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  Scene s;
  if (j.contains("bounds")) {
    const auto& b = j["bounds"];
    if (!b.is_array() || b.size() != 4)
      throw DocumentError("schema violation at bounds: expected [xmin, ymin, xmax, ymax]");
    s.xmin = num_at(b[0], "bounds[0]");
    s.ymin = num_at(b[1], "bounds[1]");
    s.xmax = num_at(b[2], "bounds[2]");
    s.ymax = num_at(b[3], "bounds[3]");
  }
  if (j.contains("objects")) {
    const auto& arr = j["objects"];
    if (!arr.is_array()) throw DocumentError("schema violation at objects: expected array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path = "objects[" + std::to_string(i) + "]";
      const auto& o = arr[i];
      SimObject obj;
      obj.id = str_at(field(o, "id", path), path + ".id");
      obj.label = str_at(field(o, "label", path), path + ".label");
      read_pair(field(o, "pos", path), path + ".pos", obj.x, obj.y);
      if (o.contains("movable")) {
        if (!o["movable"].is_boolean())
          throw DocumentError("schema violation at " + path + ".movable: expected bool");
        obj.movable = o["movable"].get<bool>();
      }
      s.objects.push_back(std::move(obj));
    }
  }
  if (j.contains("parts")) {
    const auto& arr = j["parts"];
    if (!arr.is_array()) throw DocumentError("schema violation at parts: expected array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path = "parts[" + std::to_string(i) + "]";
      const auto& p = arr[i];
      ArticulatedPart part;
      part.id = str_at(field(p, "id", path), path + ".id");
      part.label = str_at(field(p, "label", path), path + ".label");
      part.joint = num_at(field(p, "joint", path), path + ".joint");
      read_pair(field(p, "axis", path), path + ".axis", part.axis_x, part.axis_y);
      read_pair(field(p, "handle", path), path + ".handle", part.handle0_x, part.handle0_y);
      part.travel = num_at(field(p, "travel", path), path + ".travel");
      s.parts.push_back(std::move(part));
    }
  }
  if (j.contains("zones")) {
    const auto& arr = j["zones"];
    if (!arr.is_array()) throw DocumentError("schema violation at zones: expected array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path = "zones[" + std::to_string(i) + "]";
      const auto& z = arr[i];
      Zone zone;
      zone.label = str_at(field(z, "label", path), path + ".label");
      read_pair(field(z, "center", path), path + ".center", zone.cx, zone.cy);
      zone.radius = num_at(field(z, "radius", path), path + ".radius");
      s.zones.push_back(std::move(zone));
    }
  }
  if (j.contains("gripper")) {
    const auto& g = j["gripper"];
    read_pair(field(g, "pos", "gripper"), "gripper.pos", s.gripper.x, s.gripper.y);
    if (g.contains("closed")) {
      if (!g["closed"].is_boolean())
        throw DocumentError("schema violation at gripper.closed: expected bool");
      s.gripper.closed = g["closed"].get<bool>();
    }
    if (g.contains("held")) s.gripper.held = str_at(g["held"], "gripper.held");
  }
  try {
    validate_scene(s);
  } catch (const SceneError& e) {
    throw DocumentError(std::string("schema violation: ") + e.what());
  }
  return s;
}

inline nlohmann::json save_task(const TaskSpec& t) {
  nlohmann::json j;
  j["family"] = t.family;
  j["instruction"] = t.instruction;
  j["object"] = t.object_label;
  j["goal"] = t.goal_label;
  const char* kind = nullptr;
  switch (t.predicate.kind) {
    case SuccessPredicate::Kind::ObjectInZone: kind = "object_in_zone"; break;
    case SuccessPredicate::Kind::JointAbove: kind = "joint_above"; break;
    case SuccessPredicate::Kind::JointBelow: kind = "joint_below"; break;
  }
  j["predicate"] = {{"kind", kind},
                    {"subject", t.predicate.subject},
                    {"zone", t.predicate.zone},
                    {"threshold", t.predicate.threshold}};
  return j;
}

inline TaskSpec load_task(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  TaskSpec t;
  t.family = str_at(field(j, "family", "$"), "family");
  t.instruction = str_at(field(j, "instruction", "$"), "instruction");
  t.object_label = str_at(field(j, "object", "$"), "object");
  if (j.contains("goal")) t.goal_label = str_at(j["goal"], "goal");
  const auto& p = field(j, "predicate", "$");
  const std::string kind = str_at(field(p, "kind", "predicate"), "predicate.kind");
  if (kind == "object_in_zone")
    t.predicate.kind = SuccessPredicate::Kind::ObjectInZone;
  else if (kind == "joint_above")
    t.predicate.kind = SuccessPredicate::Kind::JointAbove;
  else if (kind == "joint_below")
    t.predicate.kind = SuccessPredicate::Kind::JointBelow;
  else
    throw DocumentError("schema violation at predicate.kind: unknown kind '" + kind + "'");
  t.predicate.subject = str_at(field(p, "subject", "predicate"), "predicate.subject");
  if (p.contains("zone")) t.predicate.zone = str_at(p["zone"], "predicate.zone");
  if (p.contains("threshold"))
    t.predicate.threshold = num_at(p["threshold"], "predicate.threshold");
  return t;
}

inline nlohmann::json save_perturbation(const PerturbationSpec& p) {
  nlohmann::json j;
  j["kind"] = perturbation_name(p.kind);
  switch (p.kind) {
    case PerturbationSpec::Kind::PositionShift:
      j["shift"] = {p.shift_min, p.shift_max};
      break;
    case PerturbationSpec::Kind::ObjectSubstitute:
      j["old_label"] = p.old_label;
      j["new_label"] = p.new_label;
      break;
    case PerturbationSpec::Kind::DistractorInsert:
      j["count"] = p.count;
      break;
    case PerturbationSpec::Kind::InstructionChange:
      j["new_object"] = p.new_object_label;
      j["new_goal"] = p.new_goal_label;
      break;
    case PerturbationSpec::Kind::None:
      break;
  }
  if (p.seed != 0) j["seed"] = p.seed;
  return j;
}

inline PerturbationSpec load_perturbation(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  PerturbationSpec p;
  const std::string kind = str_at(field(j, "kind", "$"), "kind");
  if (kind == "none") {
    p.kind = PerturbationSpec::Kind::None;
  } else if (kind == "position_shift") {
    p.kind = PerturbationSpec::Kind::PositionShift;
    if (j.contains("shift")) {
      const auto& s = j["shift"];
      if (!s.is_array() || s.size() != 2)
        throw DocumentError("schema violation at shift: expected [min, max]");
      p.shift_min = num_at(s[0], "shift[0]");
      p.shift_max = num_at(s[1], "shift[1]");
    }
  } else if (kind == "object_substitute") {
    p.kind = PerturbationSpec::Kind::ObjectSubstitute;
    p.old_label = str_at(field(j, "old_label", "$"), "old_label");
    p.new_label = str_at(field(j, "new_label", "$"), "new_label");
  } else if (kind == "distractor_insert") {
    p.kind = PerturbationSpec::Kind::DistractorInsert;
    p.count = static_cast<int>(num_at(field(j, "count", "$"), "count"));
  } else if (kind == "instruction_change") {
    p.kind = PerturbationSpec::Kind::InstructionChange;
    if (j.contains("new_object")) p.new_object_label = str_at(j["new_object"], "new_object");
    if (j.contains("new_goal")) p.new_goal_label = str_at(j["new_goal"], "new_goal");
  } else {
    throw DocumentError("schema violation at kind: unknown perturbation '" + kind + "'");
  }
  if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
  return p;
}

}  // namespace steerkit
