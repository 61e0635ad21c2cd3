#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace steerkit {

// log(sum(exp(x))) with the usual max shift; empty input yields -inf.
inline double logsumexp(const std::vector<double>& x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double clamp(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

// Effective sample size of normalized weights: 1 / sum(w^2).
inline double effective_sample_size(const std::vector<double>& w) {
  double s2 = 0.0;
  for (double x : w) s2 += x * x;
  return s2 > 0.0 ? 1.0 / s2 : 0.0;
}

}  // namespace steerkit
