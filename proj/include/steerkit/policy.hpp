#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerkit/chunk.hpp"
#include "steerkit/numeric.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/schedule.hpp"

namespace steerkit {

constexpr double kCovarianceFloor = 1e-6;
constexpr double kFlowTimeFloor = 1e-3;

// Gaussian mixture over flattened T*D action chunks with diagonal covariances.
// Stands in for a frozen generative policy: both the denoising score and the
// flow velocity of its noised marginals are available in closed form.
struct MixtureComponent {
  double weight = 1.0;
  std::vector<double> mean;      // length T*D
  std::vector<double> diag_cov;  // length T*D, entries >= kCovarianceFloor
};

struct GaussianMixturePolicy {
  int T = 0;
  int D = 0;
  std::vector<MixtureComponent> components;
  std::string condition_key;

  int dim() const { return T * D; }
};

inline void validate_policy(const GaussianMixturePolicy& p) {
  if (p.T <= 0 || p.D <= 0) throw std::invalid_argument("policy: T and D must be positive");
  if (p.components.empty()) throw std::invalid_argument("policy: needs at least one component");
  const std::size_t n = static_cast<std::size_t>(p.dim());
  double wsum = 0.0;
  for (const auto& c : p.components) {
    if (c.mean.size() != n || c.diag_cov.size() != n)
      throw std::invalid_argument("policy: component size mismatch");
    if (!(c.weight >= 0.0)) throw std::invalid_argument("policy: negative component weight");
    wsum += c.weight;
    for (double m : c.mean)
      if (!std::isfinite(m)) throw std::invalid_argument("policy: non-finite mean entry");
    for (double v : c.diag_cov)
      if (!(v >= kCovarianceFloor) || !std::isfinite(v))
        throw std::invalid_argument("policy: covariance entry below floor");
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw std::invalid_argument("policy: weights must sum to 1");
}

namespace detail {

// Per-component diagonal-Gaussian log density at x with mean a*mu and
// variance s2 = a2*cov + b2 (the noised marginal shape shared by both the
// denoising and flow paths).
inline double log_normal_diag(const std::vector<double>& x, const std::vector<double>& mu, double mean_scale,
                              const std::vector<double>& cov, double cov_scale, double iso_add) {
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s2 = cov_scale * cov[i] + iso_add;
    const double d = x[i] - mean_scale * mu[i];
    acc += -0.5 * (kLog2Pi + std::log(s2) + d * d / s2);
  }
  return acc;
}

// Log responsibilities of each component for x under the scaled marginal.
inline std::vector<double> log_responsibilities(const GaussianMixturePolicy& p, const std::vector<double>& x,
                                                double mean_scale, double cov_scale, double iso_add) {
  std::vector<double> lp(p.components.size());
  for (std::size_t m = 0; m < p.components.size(); ++m) {
    const auto& c = p.components[m];
    const double lw = c.weight > 0.0 ? std::log(c.weight) : -std::numeric_limits<double>::infinity();
    lp[m] = lw + log_normal_diag(x, c.mean, mean_scale, c.diag_cov, cov_scale, iso_add);
  }
  const double lz = logsumexp(lp);
  for (auto& v : lp) v -= lz;
  return lp;
}

}  // namespace detail

// Log density of the noised diffusion marginal at step k.
inline double log_marginal_diffusion(const GaussianMixturePolicy& p, const ActionChunk& a, int k,
                                     const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar_at(k);
  std::vector<double> lp(p.components.size());
  for (std::size_t m = 0; m < p.components.size(); ++m) {
    const auto& c = p.components[m];
    const double lw = c.weight > 0.0 ? std::log(c.weight) : -std::numeric_limits<double>::infinity();
    lp[m] = lw + detail::log_normal_diag(a.v, c.mean, std::sqrt(ab), c.diag_cov, ab, 1.0 - ab);
  }
  return logsumexp(lp);
}

// Noise prediction for the frozen policy at step k: the exact mixture score
// of the noised marginal, converted to the denoiser parametrization
// eps = -sqrt(1 - abar_k) * grad log p_k(a).
inline ActionChunk epsilon_analytic(const GaussianMixturePolicy& p, const ActionChunk& a, int k,
                                    const NoiseSchedule& sched) {
  if (a.T != p.T || a.D != p.D) throw std::invalid_argument("epsilon_analytic: chunk shape mismatch");
  const double ab = sched.alpha_bar_at(k);
  const double mean_scale = std::sqrt(ab);
  const auto lr = detail::log_responsibilities(p, a.v, mean_scale, ab, 1.0 - ab);
  ActionChunk out(a.T, a.D, 0.0);
  for (std::size_t m = 0; m < p.components.size(); ++m) {
    const double r = std::exp(lr[m]);
    if (r == 0.0) continue;
    const auto& c = p.components[m];
    for (int i = 0; i < a.size(); ++i) {
      const double s2 = ab * c.diag_cov[i] + (1.0 - ab);
      out[i] += r * (a[i] - mean_scale * c.mean[i]) / s2;  // -score contribution
    }
  }
  const double scale = std::sqrt(1.0 - ab);
  for (int i = 0; i < a.size(); ++i) out[i] *= scale;
  return out;
}

// Marginal velocity of the linear interpolation path a_k = (1-k) a0 + k z
// (k=1 noise, k=0 clean), as da/dk. Requires k in (0, 1].
inline ActionChunk velocity_analytic(const GaussianMixturePolicy& p, const ActionChunk& a, double k) {
  if (a.T != p.T || a.D != p.D) throw std::invalid_argument("velocity_analytic: chunk shape mismatch");
  if (!(k > 0.0) || k > 1.0) throw std::domain_error("velocity_analytic: k must be in (0, 1]");
  const double u = 1.0 - k;
  const auto lr = detail::log_responsibilities(p, a.v, u, u * u, k * k);
  ActionChunk out(a.T, a.D, 0.0);
  for (std::size_t m = 0; m < p.components.size(); ++m) {
    const double r = std::exp(lr[m]);
    if (r == 0.0) continue;
    const auto& c = p.components[m];
    for (int i = 0; i < a.size(); ++i) {
      const double s = c.diag_cov[i];
      const double V = u * u * s + k * k;
      const double delta = a[i] - u * c.mean[i];
      out[i] += r * (delta * (k - u * s) / V - c.mean[i]);
    }
  }
  return out;
}

// Deterministic part of the ancestral update (Euler-free form of the reverse
// step); exposed separately so callers that need the mean shift can build on
// the exact same arithmetic as denoise_step.
inline ActionChunk denoise_mean(const ActionChunk& a, const ActionChunk& eps_hat, int k,
                                const NoiseSchedule& sched) {
  const double al = sched.alpha_at(k);
  const double ab = sched.alpha_bar_at(k);
  const double coef = (1.0 - al) / std::sqrt(1.0 - ab);
  const double inv = 1.0 / std::sqrt(al);
  ActionChunk out(a.T, a.D);
  for (int i = 0; i < a.size(); ++i) out[i] = inv * (a[i] - coef * eps_hat[i]);
  return out;
}

// One reverse step a_k -> a_{k-1}. No noise is drawn when sigma_k == 0.
inline ActionChunk denoise_step(const ActionChunk& a, const ActionChunk& eps_hat, int k,
                                const NoiseSchedule& sched, Rng& rng) {
  if (!a.same_shape(eps_hat)) throw std::invalid_argument("denoise_step: shape mismatch");
  ActionChunk out = denoise_mean(a, eps_hat, k, sched);
  const double sg = sched.sigma_at(k);
  if (sg > 0.0) {
    for (int i = 0; i < out.size(); ++i) out[i] += sg * rng.normal();
  }
  return out;
}

// One explicit Euler step of the flow ODE, integrating k downward.
inline ActionChunk flow_step(const ActionChunk& a, const ActionChunk& v_hat, double /*k*/, double dk) {
  if (!a.same_shape(v_hat)) throw std::invalid_argument("flow_step: shape mismatch");
  if (!(dk > 0.0)) throw std::invalid_argument("flow_step: dk must be positive");
  ActionChunk out(a.T, a.D);
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] - dk * v_hat[i];
  return out;
}

inline ActionChunk gaussian_chunk(int T, int D, Rng& rng) {
  ActionChunk a(T, D);
  for (int i = 0; i < a.size(); ++i) a[i] = rng.normal();
  return a;
}

// Unguided ancestral sampling. Particle i consumes substream rng.child(i):
// first the initial draw, then one noise vector per stochastic step. The
// guided engine with every mechanism disabled reproduces this bit for bit.
inline std::vector<ActionChunk> sample_unguided(const GaussianMixturePolicy& p, int B,
                                                const NoiseSchedule& sched, Rng& rng) {
  if (B < 1) throw std::invalid_argument("sample_unguided: B must be >= 1");
  std::vector<ActionChunk> out;
  out.reserve(B);
  for (int i = 0; i < B; ++i) {
    Rng stream = rng.child(static_cast<std::uint64_t>(i));
    ActionChunk a = gaussian_chunk(p.T, p.D, stream);
    for (int k = sched.K; k >= 1; --k) {
      const ActionChunk eps = epsilon_analytic(p, a, k, sched);
      a = denoise_step(a, eps, k, sched, stream);
    }
    out.push_back(std::move(a));
  }
  return out;
}

// Unguided flow sampling: Euler from k=1 down to kFlowTimeFloor in `steps`
// uniform steps, same substream discipline as the ancestral sampler.
inline std::vector<ActionChunk> sample_unguided_flow(const GaussianMixturePolicy& p, int B, int steps,
                                                     Rng& rng) {
  if (B < 1 || steps < 1) throw std::invalid_argument("sample_unguided_flow: B and steps must be >= 1");
  const double dk = (1.0 - kFlowTimeFloor) / steps;
  std::vector<ActionChunk> out;
  out.reserve(B);
  for (int i = 0; i < B; ++i) {
    Rng stream = rng.child(static_cast<std::uint64_t>(i));
    ActionChunk a = gaussian_chunk(p.T, p.D, stream);
    for (int j = 0; j < steps; ++j) {
      const double k = 1.0 - j * dk;
      const ActionChunk v = velocity_analytic(p, a, k);
      a = flow_step(a, v, k, dk);
    }
    out.push_back(std::move(a));
  }
  return out;
}

// --- EM fitting -------------------------------------------------------------

struct EmResult {
  GaussianMixturePolicy policy;
  std::vector<double> log_likelihood;  // one entry per iteration
};

// Diagonal-covariance EM over flattened chunks. k-means++ seeding, log-domain
// responsibilities, covariance floored at kCovarianceFloor.
inline EmResult fit_gmm_em(const std::vector<ActionChunk>& demos, int M, int iters, Rng& rng,
                           const std::string& condition_key = "") {
  if (demos.empty()) throw std::invalid_argument("fit_gmm_em: no demos");
  if (M < 1) throw std::invalid_argument("fit_gmm_em: M must be >= 1");
  if (static_cast<std::size_t>(M) > demos.size())
    throw std::invalid_argument("fit_gmm_em: more components than demos");
  if (iters < 1) throw std::invalid_argument("fit_gmm_em: iters must be >= 1");
  const int T = demos[0].T, D = demos[0].D;
  for (const auto& d : demos)
    if (d.T != T || d.D != D) throw std::invalid_argument("fit_gmm_em: demo shape mismatch");
  const std::size_t N = demos.size();
  const std::size_t n = static_cast<std::size_t>(T) * D;

  // global variance for the initial covariances
  std::vector<double> gmean(n, 0.0), gvar(n, 0.0);
  for (const auto& d : demos)
    for (std::size_t i = 0; i < n; ++i) gmean[i] += d.v[i];
  for (auto& m : gmean) m /= static_cast<double>(N);
  for (const auto& d : demos)
    for (std::size_t i = 0; i < n; ++i) {
      const double dv = d.v[i] - gmean[i];
      gvar[i] += dv * dv;
    }
  for (auto& v : gvar) v = std::max(v / static_cast<double>(N), kCovarianceFloor);

  // k-means++ seeding
  std::vector<std::size_t> centers;
  centers.push_back(rng.next_u64() % N);
  std::vector<double> d2(N);
  while (centers.size() < static_cast<std::size_t>(M)) {
    double total = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c : centers) best = std::min(best, std::pow(l2_distance(demos[j], demos[c]), 2));
      d2[j] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform01() * total;
      for (; pick + 1 < N; ++pick) {
        r -= d2[pick];
        if (r <= 0.0) break;
      }
    } else {
      pick = rng.next_u64() % N;
    }
    centers.push_back(pick);
  }

  GaussianMixturePolicy p;
  p.T = T;
  p.D = D;
  p.condition_key = condition_key;
  p.components.resize(M);
  for (int m = 0; m < M; ++m) {
    p.components[m].weight = 1.0 / M;
    p.components[m].mean = demos[centers[m]].v;
    p.components[m].diag_cov = gvar;
  }

  EmResult res;
  std::vector<std::vector<double>> resp(N, std::vector<double>(M));
  for (int it = 0; it < iters; ++it) {
    // E step
    double ll = 0.0;
    std::vector<double> lp(M);
    for (std::size_t j = 0; j < N; ++j) {
      for (int m = 0; m < M; ++m) {
        const auto& c = p.components[m];
        const double lw = c.weight > 0.0 ? std::log(c.weight) : -745.0;
        lp[m] = lw + detail::log_normal_diag(demos[j].v, c.mean, 1.0, c.diag_cov, 1.0, 0.0);
      }
      const double lz = logsumexp(lp);
      ll += lz;
      for (int m = 0; m < M; ++m) resp[j][m] = std::exp(lp[m] - lz);
    }
    res.log_likelihood.push_back(ll);
    // M step
    for (int m = 0; m < M; ++m) {
      double nk = 0.0;
      for (std::size_t j = 0; j < N; ++j) nk += resp[j][m];
      auto& c = p.components[m];
      c.weight = nk / static_cast<double>(N);
      if (nk < 1e-12) continue;  // dead component keeps previous parameters
      std::vector<double> mu(n, 0.0);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t i = 0; i < n; ++i) mu[i] += resp[j][m] * demos[j].v[i];
      for (auto& x : mu) x /= nk;
      std::vector<double> var(n, 0.0);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t i = 0; i < n; ++i) {
          const double dv = demos[j].v[i] - mu[i];
          var[i] += resp[j][m] * dv * dv;
        }
      for (auto& x : var) x = std::max(x / nk, kCovarianceFloor);
      c.mean = std::move(mu);
      c.diag_cov = std::move(var);
    }
    // renormalize weights defensively
    double ws = 0.0;
    for (const auto& c : p.components) ws += c.weight;
    for (auto& c : p.components) c.weight /= ws;
  }
  res.policy = std::move(p);
  validate_policy(res.policy);
  return res;
}

}  // namespace steerkit
