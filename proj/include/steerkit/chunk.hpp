#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace steerkit {

// A T x D action chunk, row-major. Rows are control steps; the first D-1
// columns are positional deltas, the last column is the gripper channel.
// The steering stack treats it as a flat vector of T*D reals.
struct ActionChunk {
  int T = 0;
  int D = 0;
  std::vector<double> v;

  ActionChunk() = default;
  ActionChunk(int t, int d, double fill = 0.0) : T(t), D(d), v(static_cast<std::size_t>(t) * d, fill) {
    if (t <= 0 || d <= 0) throw std::invalid_argument("ActionChunk: T and D must be positive");
  }

  int size() const { return T * D; }

  double& at(int t, int d) { return v[static_cast<std::size_t>(t) * D + d]; }
  double at(int t, int d) const { return v[static_cast<std::size_t>(t) * D + d]; }

  double& operator[](int i) { return v[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return v[static_cast<std::size_t>(i)]; }

  bool same_shape(const ActionChunk& o) const { return T == o.T && D == o.D; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline double l2_distance(const ActionChunk& a, const ActionChunk& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace steerkit
