#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace steerkit {

// Discrete variance schedule for ancestral denoising. Index convention:
// step k in [1, K]; arrays are 0-based (entry k-1 belongs to step k).
// sigma follows the standard posterior choice, so sigma at k=1 is exactly 0.
struct NoiseSchedule {
  int K = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  double beta_at(int k) const { return beta[check(k)]; }
  double alpha_at(int k) const { return alpha[check(k)]; }
  double alpha_bar_at(int k) const { return alpha_bar[check(k)]; }
  double sigma_at(int k) const { return sigma[check(k)]; }

 private:
  int check(int k) const {
    if (k < 1 || k > K) throw std::out_of_range("NoiseSchedule: step out of range");
    return k - 1;
  }
};

inline NoiseSchedule build_noise_schedule_from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule: needs at least one beta");
  NoiseSchedule s;
  s.K = static_cast<int>(betas.size());
  s.beta = betas;
  s.alpha.resize(betas.size());
  s.alpha_bar.resize(betas.size());
  s.sigma.resize(betas.size());
  double bar = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const double b = betas[i];
    if (!(b > 0.0) || !(b < 1.0))
      throw std::invalid_argument("noise schedule: betas must lie in (0, 1)");
    const double prev_bar = bar;
    s.alpha[i] = 1.0 - b;
    bar *= s.alpha[i];
    s.alpha_bar[i] = bar;
    // posterior variance beta * (1 - abar_{k-1}) / (1 - abar_k); abar_0 = 1
    s.sigma[i] = std::sqrt(b * (1.0 - prev_bar) / (1.0 - bar));
  }
  return s;
}

inline NoiseSchedule build_noise_schedule(int K, double beta_min = 1e-4, double beta_max = 0.3) {
  if (K < 1) throw std::invalid_argument("build_noise_schedule: K must be >= 1");
  if (!(beta_min > 0.0) || !(beta_max < 1.0) || beta_min > beta_max)
    throw std::invalid_argument("build_noise_schedule: need 0 < beta_min <= beta_max < 1");
  std::vector<double> betas(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i)
    betas[static_cast<std::size_t>(i)] =
        (K == 1) ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(i) / (K - 1);
  return build_noise_schedule_from_betas(betas);
}

}  // namespace steerkit
