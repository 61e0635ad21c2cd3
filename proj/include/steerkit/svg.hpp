#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "steerkit/sim.hpp"

namespace steerkit {

namespace svg_detail {

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Workspace to viewport, y flipped so "up" in the scene is up on screen.
struct Mapper {
  double xmin, ymin, xmax, ymax, size;
  double x(double wx) const { return (wx - xmin) / (xmax - xmin) * size; }
  double y(double wy) const { return (ymax - wy) / (ymax - ymin) * size; }
  double len(double w) const { return w / (xmax - xmin) * size; }
};

inline const char* object_fill(const std::string& label) {
  if (label == "red") return "#d62728";
  if (label == "blue") return "#1f77b4";
  if (label == "pink") return "#e377c2";
  if (label == "white") return "#f2f2f2";
  return "#7f7f7f";
}

inline const char* zone_fill(const std::string& label) {
  if (label.rfind("green", 0) == 0) return "#2ca02c";
  if (label.rfind("yellow", 0) == 0) return "#e6c229";
  return "#9467bd";
}

inline const char* stage_stroke(int stage) {
  static constexpr std::array<const char*, 5> kPalette = {
      "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"};
  const int i = stage >= 1 ? (stage - 1) % static_cast<int>(kPalette.size()) : 0;
  return kPalette[static_cast<std::size_t>(i)];
}

}  // namespace svg_detail

// Renders the scene with each episode's cumulative gripper path, one line
// segment per simulated step, stroke color keyed to the stage the chunk ran
// under. Output is a standalone SVG 1.1 document; an empty episode list
// yields the scene alone.
inline std::string plot_trajectories(const Scene& scene,
                                     const std::vector<EpisodeResult>& episodes, int chunk_T,
                                     const std::string& title = "") {
  using namespace svg_detail;
  if (chunk_T < 1) throw std::invalid_argument("plot_trajectories: chunk_T must be >= 1");
  const Mapper m{scene.xmin, scene.ymin, scene.xmax, scene.ymax, 720.0};

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"720\" height=\"720\" "
       "viewBox=\"0 0 720 720\">\n";
  if (!title.empty()) s += "  <title>" + escape(title) + "</title>\n";
  s += "  <rect x=\"0\" y=\"0\" width=\"720\" height=\"720\" fill=\"#fcfcf7\" stroke=\"#444\"/>\n";

  for (const auto& z : scene.zones) {
    s += "  <circle cx=\"" + fmt(m.x(z.cx)) + "\" cy=\"" + fmt(m.y(z.cy)) + "\" r=\"" +
         fmt(m.len(z.radius)) + "\" fill=\"" + zone_fill(z.label) +
         "\" fill-opacity=\"0.25\" stroke=\"" + zone_fill(z.label) + "\"/>\n";
    s += "  <text x=\"" + fmt(m.x(z.cx)) + "\" y=\"" + fmt(m.y(z.cy)) +
         "\" font-size=\"12\" text-anchor=\"middle\" fill=\"#555\">" + escape(z.label) +
         "</text>\n";
  }
  for (const auto& p : scene.parts) {
    const double ex = p.handle0_x + p.axis_x * p.travel;
    const double ey = p.handle0_y + p.axis_y * p.travel;
    s += "  <line x1=\"" + fmt(m.x(p.handle0_x)) + "\" y1=\"" + fmt(m.y(p.handle0_y)) +
         "\" x2=\"" + fmt(m.x(ex)) + "\" y2=\"" + fmt(m.y(ey)) +
         "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
    s += "  <circle cx=\"" + fmt(m.x(p.handle_x())) + "\" cy=\"" + fmt(m.y(p.handle_y())) +
         "\" r=\"" + fmt(m.len(0.02)) + "\" fill=\"#8c564b\"/>\n";
    s += "  <text x=\"" + fmt(m.x(p.handle_x())) + "\" y=\"" + fmt(m.y(p.handle_y()) - 8.0) +
         "\" font-size=\"12\" text-anchor=\"middle\" fill=\"#555\">" + escape(p.label) +
         "</text>\n";
  }
  for (const auto& o : scene.objects) {
    const double half = m.len(0.02);
    s += "  <rect x=\"" + fmt(m.x(o.x) - half) + "\" y=\"" + fmt(m.y(o.y) - half) +
         "\" width=\"" + fmt(2 * half) + "\" height=\"" + fmt(2 * half) + "\" fill=\"" +
         object_fill(o.label) + "\" stroke=\"#333\"/>\n";
  }
  s += "  <circle cx=\"" + fmt(m.x(scene.gripper.x)) + "\" cy=\"" + fmt(m.y(scene.gripper.y)) +
       "\" r=\"" + fmt(m.len(0.015)) + "\" fill=\"none\" stroke=\"#111\" stroke-width=\"2\"/>\n";

  for (const auto& ep : episodes) {
    double px = m.x(scene.gripper.x);
    double py = m.y(scene.gripper.y);
    for (std::size_t t = 0; t < ep.gripper_path.size(); ++t) {
      const std::size_t chunk = t / static_cast<std::size_t>(chunk_T);
      const int stage = chunk < ep.trace.size() ? ep.trace[chunk].stage : 1;
      const double cx = m.x(ep.gripper_path[t][0]);
      const double cy = m.y(ep.gripper_path[t][1]);
      s += "  <line x1=\"" + fmt(px) + "\" y1=\"" + fmt(py) + "\" x2=\"" + fmt(cx) + "\" y2=\"" +
           fmt(cy) + "\" stroke=\"" + stage_stroke(stage) +
           "\" stroke-width=\"1.5\" stroke-opacity=\"0.8\"/>\n";
      px = cx;
      py = cy;
    }
  }

  s += "</svg>\n";
  return s;
}

}  // namespace steerkit
