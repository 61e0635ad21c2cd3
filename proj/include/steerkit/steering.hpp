#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerkit/chunk.hpp"
#include "steerkit/numeric.hpp"
#include "steerkit/policy.hpp"
#include "steerkit/reward_eval.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/schedule.hpp"

namespace steerkit {

// A particle set at a common denoising step. Reward and weight caches are
// optional; weights, when present, are nonnegative and sum to 1.
struct ParticleBatch {
  std::vector<ActionChunk> chunks;
  std::vector<double> rewards;
  std::vector<double> weights;

  int size() const { return static_cast<int>(chunks.size()); }
};

inline void validate_batch(const ParticleBatch& b) {
  if (b.chunks.empty()) throw std::invalid_argument("particle batch must hold at least one chunk");
  for (const auto& c : b.chunks)
    if (!c.same_shape(b.chunks[0])) throw std::invalid_argument("particle chunks must share one shape");
  if (!b.rewards.empty() && b.rewards.size() != b.chunks.size())
    throw std::invalid_argument("reward cache size mismatch");
  if (!b.weights.empty()) {
    if (b.weights.size() != b.chunks.size()) throw std::invalid_argument("weight cache size mismatch");
    double sum = 0.0;
    for (double w : b.weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("weights must sum to 1");
  }
}

enum class Backend { Diffusion, Flow };

enum class FkPotential {
  Increment,  // telescoping reward increments plus proposal-kernel correction
  Current,    // literal potential exp(R) of the current noisy particle
};

struct GuidanceConfig {
  Backend backend = Backend::Diffusion;
  int batch_size = 32;
  int denoise_steps = 32;  // reverse steps (diffusion) or Euler steps (flow)
  double beta_min = 1e-4;
  double beta_max = 0.3;

  double lambda_max = 1.0;

  // mcmc_steps < 0 selects the backend default: 4 for diffusion, 1 for flow.
  int mcmc_steps = -1;
  double mcmc_step_scale = 0.05;
  bool mcmc_noise = true;

  bool rbf_enabled = true;
  double rbf_epsilon = 0.1;
  double rbf_window = 0.3;  // fraction of steps, from the noisy end

  bool fk_enabled = true;
  int fk_period = 4;
  double ess_threshold = 0.5;  // resample when ESS / B drops below this
  FkPotential fk_potential = FkPotential::Increment;

  // Evaluate rewards on the one-step clean estimate instead of the noisy
  // particle. Gradients then treat the base prediction as frozen.
  bool reward_on_clean = false;

  std::uint64_t seed = 0;
};

inline int effective_mcmc_steps(const GuidanceConfig& c) {
  if (c.mcmc_steps >= 0) return c.mcmc_steps;
  return c.backend == Backend::Diffusion ? 4 : 1;
}

inline void validate_guidance_config(const GuidanceConfig& c) {
  if (c.batch_size < 1) throw std::invalid_argument("guidance: batch_size must be >= 1");
  if (c.denoise_steps < 1) throw std::invalid_argument("guidance: denoise_steps must be >= 1");
  if (!(c.lambda_max >= 0.0) || !std::isfinite(c.lambda_max))
    throw std::invalid_argument("guidance: lambda_max must be finite and >= 0");
  if (!(c.rbf_epsilon > 0.0)) throw std::invalid_argument("guidance: rbf_epsilon must be > 0");
  if (!(c.rbf_window >= 0.0) || !(c.rbf_window <= 1.0))
    throw std::invalid_argument("guidance: rbf_window must lie in [0, 1]");
  if (c.fk_period < 1) throw std::invalid_argument("guidance: fk_period must be >= 1");
  if (!(c.ess_threshold >= 0.0) || !(c.ess_threshold <= 1.0))
    throw std::invalid_argument("guidance: ess_threshold must lie in [0, 1]");
  if (!(c.mcmc_step_scale > 0.0)) throw std::invalid_argument("guidance: mcmc_step_scale must be > 0");
  if (!(c.beta_min > 0.0) || !(c.beta_max >= c.beta_min) || c.beta_max >= 1.0)
    throw std::invalid_argument("guidance: betas must satisfy 0 < beta_min <= beta_max < 1");
}

// Exact gradient, per particle, of the pairwise potential
// sum_{j != i} 1 / (||a_i - a_j|| + eps) with respect to a_i. The potential
// grows as particles approach, so callers separate particles by stepping
// along the NEGATED gradient; coincident pairs contribute zero (subgradient).
inline std::vector<ActionChunk> rbf_repulsion_grad(const ParticleBatch& batch, double rbf_epsilon) {
  validate_batch(batch);
  if (!(rbf_epsilon > 0.0)) throw std::invalid_argument("rbf_epsilon must be > 0");
  const int B = batch.size();
  const int n = batch.chunks[0].size();
  std::vector<ActionChunk> out(static_cast<std::size_t>(B),
                               ActionChunk(batch.chunks[0].T, batch.chunks[0].D, 0.0));
  for (int i = 0; i < B; ++i) {
    for (int j = i + 1; j < B; ++j) {
      double d2 = 0.0;
      for (int e = 0; e < n; ++e) {
        const double d = batch.chunks[i][e] - batch.chunks[j][e];
        d2 += d * d;
      }
      const double dist = std::sqrt(d2);
      if (dist == 0.0) continue;
      const double denom = dist + rbf_epsilon;
      const double scale = -1.0 / (dist * denom * denom);
      for (int e = 0; e < n; ++e) {
        const double d = batch.chunks[i][e] - batch.chunks[j][e];
        out[i][e] += scale * d;
        out[j][e] -= scale * d;
      }
    }
  }
  return out;
}

// eps_hat = eps - lambda * sqrt(1 - abar_k) * g
inline ActionChunk apply_diffusion_guidance(const ActionChunk& eps, const ActionChunk& g, double lambda,
                                            int k, const NoiseSchedule& sched) {
  if (!eps.same_shape(g)) throw std::invalid_argument("guidance shapes must match");
  if (lambda == 0.0) return eps;
  const double scale = lambda * std::sqrt(1.0 - sched.alpha_bar_at(k));
  ActionChunk out(eps.T, eps.D);
  for (int i = 0; i < eps.size(); ++i) out[i] = eps[i] - scale * g[i];
  return out;
}

// v_hat = v + lambda * g
inline ActionChunk apply_flow_guidance(const ActionChunk& v, const ActionChunk& g, double lambda) {
  if (!v.same_shape(g)) throw std::invalid_argument("guidance shapes must match");
  if (lambda == 0.0) return v;
  ActionChunk out(v.T, v.D);
  for (int i = 0; i < v.size(); ++i) out[i] = v[i] + lambda * g[i];
  return out;
}

// Langevin-style inner refinement on the reward landscape:
//   a <- a + step_scale * lambda * grad R_s(a) + sqrt(2 * step_scale) * xi.
// The gradient is recomputed at every inner step; the base model prediction
// is not. Noise draws happen in particle-index order from `rng`.
inline void mcmc_refine(ParticleBatch& batch, const RewardProgram& program, int s,
                        const KeypointSet& kps, const std::vector<double>& grip_start, double lambda,
                        int steps, double step_scale, bool with_noise, Rng& rng) {
  validate_batch(batch);
  if (steps < 0) throw std::invalid_argument("mcmc steps must be >= 0");
  if (!(step_scale > 0.0)) throw std::invalid_argument("mcmc step_scale must be > 0");
  if (steps == 0) return;
  const double noise_scale = std::sqrt(2.0 * step_scale);
  for (auto& chunk : batch.chunks) {
    for (int it = 0; it < steps; ++it) {
      if (lambda != 0.0) {
        const ActionChunk g = grad_reward(program, s, chunk, kps, grip_start);
        for (int e = 0; e < chunk.size(); ++e) chunk[e] += step_scale * lambda * g[e];
      }
      if (with_noise)
        for (int e = 0; e < chunk.size(); ++e) chunk[e] += noise_scale * rng.normal();
    }
  }
  batch.rewards.clear();
  batch.weights.clear();
}

// Normalized potentials softmax(r): computed in the log domain, immune to
// large rewards, invariant to a constant shift of all rewards.
inline std::vector<double> fk_weights(const std::vector<double>& rewards) {
  if (rewards.empty()) throw std::invalid_argument("fk_weights: empty reward vector");
  for (double r : rewards)
    if (!std::isfinite(r)) throw std::invalid_argument("fk_weights: rewards must be finite");
  const double lz = logsumexp(rewards);
  std::vector<double> w(rewards.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    w[i] = std::exp(rewards[i] - lz);
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}

// Multinomial resampling with replacement; batch size and shapes preserved,
// reward/weight caches invalidated.
inline void fk_resample(ParticleBatch& batch, const std::vector<double>& weights, Rng& rng) {
  validate_batch(batch);
  if (weights.size() != batch.chunks.size())
    throw std::invalid_argument("fk_resample: weight count mismatch");
  const int B = batch.size();
  std::vector<int> ancestor(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const double u = rng.uniform01();
    double acc = 0.0;
    int pick = B - 1;
    for (int j = 0; j < B; ++j) {
      acc += weights[static_cast<std::size_t>(j)];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    ancestor[static_cast<std::size_t>(i)] = pick;
  }
  std::vector<ActionChunk> next;
  next.reserve(B);
  for (int i = 0; i < B; ++i) next.push_back(batch.chunks[static_cast<std::size_t>(ancestor[i])]);
  batch.chunks = std::move(next);
  batch.rewards.clear();
  batch.weights.clear();
}

struct StepDiagnostics {
  int step = 0;        // 1-based denoising step counter from the noisy end
  double k_value = 0;  // diffusion: the integer step k just executed; flow: time k
  double reward_min = 0;
  double reward_mean = 0;
  double reward_max = 0;
  double ess = 0;
  bool resampled = false;
};

struct GuidedResult {
  ActionChunk best;
  int best_index = 0;
  ParticleBatch batch;  // clean particles with final rewards and weights
  std::vector<double> final_rewards;
  std::vector<StepDiagnostics> diagnostics;
};

// Per-step trace of one denoising pass as CSV text, one row per step.
inline std::string diagnostics_csv(const std::vector<StepDiagnostics>& diag) {
  std::string out = "step,k,reward_min,reward_mean,reward_max,ess,resampled\n";
  char buf[192];
  for (const auto& d : diag) {
    std::snprintf(buf, sizeof buf, "%d,%.6g,%.6g,%.6g,%.6g,%.6g,%d\n", d.step, d.k_value,
                  d.reward_min, d.reward_mean, d.reward_max, d.ess, d.resampled ? 1 : 0);
    out += buf;
  }
  return out;
}

namespace steering_detail {

// Draws the ancestor indices for one resample event from the root stream.
inline std::vector<int> sample_ancestors(const std::vector<double>& w, int B, Rng& rng) {
  std::vector<int> anc(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const double u = rng.uniform01();
    double acc = 0.0;
    int pick = B - 1;
    for (int j = 0; j < B; ++j) {
      acc += w[static_cast<std::size_t>(j)];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    anc[static_cast<std::size_t>(i)] = pick;
  }
  return anc;
}

inline void summarize(StepDiagnostics& d, const std::vector<double>& rewards) {
  d.reward_min = rewards[0];
  d.reward_max = rewards[0];
  d.reward_mean = 0.0;
  for (double r : rewards) {
    d.reward_min = std::min(d.reward_min, r);
    d.reward_max = std::max(d.reward_max, r);
    d.reward_mean += r;
  }
  d.reward_mean /= static_cast<double>(rewards.size());
}

}  // namespace steering_detail

// One full guided denoising pass: reward-gradient injection, batch repulsion
// over the noisy window, inner MCMC refinement, and periodic reward-weighted
// resampling. Deterministic given the incoming rng. With every mechanism
// disabled the diffusion path reproduces sample_unguided bit for bit (and the
// flow path sample_unguided_flow): identical child-stream layout, identical
// draw order.
inline GuidedResult guided_denoise(const GaussianMixturePolicy& policy, const RewardProgram& program,
                                   int s, const KeypointSet& kps, const std::vector<double>& grip_start,
                                   const GuidanceConfig& config, double lambda_t, Rng& rng) {
  validate_guidance_config(config);
  validate_policy(policy);
  if (!(lambda_t >= 0.0) || !std::isfinite(lambda_t))
    throw std::invalid_argument("guided_denoise: lambda_t must be finite and >= 0");
  const int B = config.batch_size;
  const int S = config.denoise_steps;
  const bool flow = config.backend == Backend::Flow;
  const int mcmc = effective_mcmc_steps(config);
  const double mcmc_noise_scale = std::sqrt(2.0 * config.mcmc_step_scale);

  NoiseSchedule sched;
  if (!flow) sched = build_noise_schedule(S, config.beta_min, config.beta_max);
  const double dk = (1.0 - kFlowTimeFloor) / S;

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) streams.push_back(rng.child(static_cast<std::uint64_t>(i)));

  ParticleBatch batch;
  batch.chunks.reserve(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) batch.chunks.push_back(gaussian_chunk(policy.T, policy.D, streams[i]));

  // Reward value/gradient at a noise level. Diffusion levels are integer
  // steps k in [0, K]; flow levels are continuous times in [0, 1]. In clean
  // mode the one-step estimate is used with the base prediction frozen, so
  // the gradient only picks up the 1/sqrt(abar) (diffusion) chain factor.
  auto reward_value = [&](const ActionChunk& a, double level) {
    if (!config.reward_on_clean || level <= 0.0)
      return eval_reward(program, s, a, kps, grip_start);
    ActionChunk clean(a.T, a.D);
    if (!flow) {
      const int k = static_cast<int>(level);
      const double ab = sched.alpha_bar_at(k);
      const ActionChunk eps = epsilon_analytic(policy, a, k, sched);
      const double sq = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
      for (int e = 0; e < a.size(); ++e) clean[e] = inv * (a[e] - sq * eps[e]);
    } else {
      const ActionChunk v = velocity_analytic(policy, a, level);
      for (int e = 0; e < a.size(); ++e) clean[e] = a[e] - level * v[e];
    }
    return eval_reward(program, s, clean, kps, grip_start);
  };
  auto reward_grad = [&](const ActionChunk& a, double level) {
    if (!config.reward_on_clean || level <= 0.0) return grad_reward(program, s, a, kps, grip_start);
    ActionChunk clean(a.T, a.D);
    double chain = 1.0;
    if (!flow) {
      const int k = static_cast<int>(level);
      const double ab = sched.alpha_bar_at(k);
      const ActionChunk eps = epsilon_analytic(policy, a, k, sched);
      const double sq = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
      for (int e = 0; e < a.size(); ++e) clean[e] = inv * (a[e] - sq * eps[e]);
      chain = inv;
    } else {
      const ActionChunk v = velocity_analytic(policy, a, level);
      for (int e = 0; e < a.size(); ++e) clean[e] = a[e] - level * v[e];
    }
    ActionChunk g = grad_reward(program, s, clean, kps, grip_start);
    if (chain != 1.0)
      for (int e = 0; e < g.size(); ++e) g[e] *= chain;
    return g;
  };

  const int dim = policy.dim();
  std::vector<double> logpot(static_cast<std::size_t>(B), 0.0);
  std::vector<double> r_prev(static_cast<std::size_t>(B), 0.0);
  std::vector<double> r_now(static_cast<std::size_t>(B), 0.0);
  std::vector<double> weights(static_cast<std::size_t>(B), 1.0 / B);
  GuidedResult result;
  result.diagnostics.reserve(static_cast<std::size_t>(S));
  ActionChunk z(policy.T, policy.D);

  for (int step = 1; step <= S; ++step) {
    // diffusion: executing reverse step k -> k-1; flow: time k -> k - dk
    const int k_int = S - step + 1;
    const double k_time = 1.0 - (step - 1) * dk;
    const double level_next = flow ? std::max(k_time - dk, kFlowTimeFloor)
                                   : static_cast<double>(k_int - 1);
    const bool rbf_active =
        config.rbf_enabled && B > 1 && static_cast<double>(step - 1) < config.rbf_window * S;
    std::vector<ActionChunk> g_rbf;
    if (rbf_active) g_rbf = rbf_repulsion_grad(batch, config.rbf_epsilon);

    for (int i = 0; i < B; ++i) {
      ActionChunk& a = batch.chunks[static_cast<std::size_t>(i)];
      if (!flow) {
        const ActionChunk eps = epsilon_analytic(policy, a, k_int, sched);
        ActionChunk eps_hat = eps;
        bool shifted = false;
        if (lambda_t > 0.0) {
          const ActionChunk g = reward_grad(a, static_cast<double>(k_int));
          eps_hat = apply_diffusion_guidance(eps_hat, g, lambda_t, k_int, sched);
          shifted = true;
        }
        if (rbf_active) {
          ActionChunk repel = g_rbf[static_cast<std::size_t>(i)];
          for (int e = 0; e < dim; ++e) repel[e] = -repel[e];
          eps_hat = apply_diffusion_guidance(eps_hat, repel, 1.0, k_int, sched);
          shifted = true;
        }
        const ActionChunk mean = denoise_mean(a, eps_hat, k_int, sched);
        const double sg = sched.sigma_at(k_int);
        if (sg > 0.0) {
          for (int e = 0; e < dim; ++e) z[e] = streams[i].normal();
          if (config.fk_enabled && shifted) {
            // exact log density ratio of the base kernel to the shifted
            // proposal kernel at the realized draw
            const ActionChunk base_mean = denoise_mean(a, eps, k_int, sched);
            double zs = 0.0, ss = 0.0;
            for (int e = 0; e < dim; ++e) {
              const double sh = mean[e] - base_mean[e];
              zs += z[e] * sh;
              ss += sh * sh;
            }
            logpot[static_cast<std::size_t>(i)] += -zs / sg - ss / (2.0 * sg * sg);
          }
          for (int e = 0; e < dim; ++e) a[e] = mean[e] + sg * z[e];
        } else {
          a = mean;
        }
      } else {
        const ActionChunk v = velocity_analytic(policy, a, k_time);
        ActionChunk v_hat = v;
        if (lambda_t > 0.0) {
          ActionChunk g = reward_grad(a, k_time);
          for (int e = 0; e < dim; ++e) g[e] = -g[e];  // Euler integrates downhill in k
          v_hat = apply_flow_guidance(v_hat, g, lambda_t);
        }
        if (rbf_active) v_hat = apply_flow_guidance(v_hat, g_rbf[static_cast<std::size_t>(i)], 1.0);
        a = flow_step(a, v_hat, k_time, dk);
      }

      // inner refinement at the post-step noise level
      for (int it = 0; it < mcmc; ++it) {
        ActionChunk& cur = batch.chunks[static_cast<std::size_t>(i)];
        if (lambda_t > 0.0) {
          const ActionChunk g = reward_grad(cur, level_next);
          for (int e = 0; e < dim; ++e)
            cur[e] += config.mcmc_step_scale * lambda_t * g[e];
        }
        if (config.mcmc_noise)
          for (int e = 0; e < dim; ++e) cur[e] += mcmc_noise_scale * streams[i].normal();
      }

      r_now[static_cast<std::size_t>(i)] =
          reward_value(batch.chunks[static_cast<std::size_t>(i)], level_next);
    }

    // Potentials accrue at events only: between events logpot carries just
    // the proposal-kernel corrections, and the event adds the telescoping
    // reward increment since the previous event. The trigger ESS therefore
    // measures correction-induced degeneracy, not reward spread.
    StepDiagnostics diag;
    diag.step = step;
    diag.k_value = flow ? k_time : static_cast<double>(k_int);
    steering_detail::summarize(diag, r_now);
    const bool last = step == S;
    if (config.fk_enabled) {
      weights = fk_weights(logpot);
      const double ess_trigger = effective_sample_size(weights);
      const bool event =
          last || step % config.fk_period == 0 || ess_trigger < config.ess_threshold * B;
      if (event) {
        for (int i = 0; i < B; ++i) {
          const std::size_t ui = static_cast<std::size_t>(i);
          logpot[ui] += config.fk_potential == FkPotential::Increment ? r_now[ui] - r_prev[ui]
                                                                      : r_now[ui];
        }
        weights = fk_weights(logpot);
        if (!last && B > 1) {
          const std::vector<int> anc = steering_detail::sample_ancestors(weights, B, rng);
          std::vector<ActionChunk> next;
          next.reserve(static_cast<std::size_t>(B));
          std::vector<double> rp(static_cast<std::size_t>(B)), rn(static_cast<std::size_t>(B));
          for (int i = 0; i < B; ++i) {
            next.push_back(batch.chunks[static_cast<std::size_t>(anc[i])]);
            rp[static_cast<std::size_t>(i)] = r_now[static_cast<std::size_t>(anc[i])];
            rn[static_cast<std::size_t>(i)] = r_now[static_cast<std::size_t>(anc[i])];
          }
          batch.chunks = std::move(next);
          r_prev = std::move(rp);
          r_now = std::move(rn);
          logpot.assign(static_cast<std::size_t>(B), 0.0);
          weights.assign(static_cast<std::size_t>(B), 1.0 / B);
          diag.resampled = true;
        } else {
          r_prev = r_now;
        }
      }
      diag.ess = effective_sample_size(weights);
    } else {
      weights.assign(static_cast<std::size_t>(B), 1.0 / B);
      diag.ess = static_cast<double>(B);
    }
    result.diagnostics.push_back(diag);
  }

  result.final_rewards = r_now;
  result.batch = std::move(batch);
  result.batch.rewards = result.final_rewards;
  result.batch.weights = weights;

  int best = 0;
  for (int i = 1; i < B; ++i)
    if (result.final_rewards[static_cast<std::size_t>(i)] >
        result.final_rewards[static_cast<std::size_t>(best)])
      best = i;
  result.best_index = best;
  result.best = result.batch.chunks[static_cast<std::size_t>(best)];
  return result;
}

}  // namespace steerkit
