#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "steerkit/policy.hpp"
#include "testutil.hpp"

using namespace steerkit;

namespace {

GaussianMixturePolicy standard_normal_policy(int T, int D) {
  GaussianMixturePolicy p;
  p.T = T;
  p.D = D;
  p.components.resize(1);
  p.components[0].weight = 1.0;
  p.components[0].mean.assign(static_cast<std::size_t>(T) * D, 0.0);
  p.components[0].diag_cov.assign(static_cast<std::size_t>(T) * D, 1.0);
  return p;
}

}  // namespace

TEST_CASE("noise schedule hand values and invariants", "[policy]") {
  auto s = build_noise_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_at(1) == Catch::Approx(0.9).epsilon(1e-12));
  CHECK(s.alpha_at(2) == Catch::Approx(0.8).epsilon(1e-12));
  CHECK(s.alpha_bar_at(1) == Catch::Approx(0.9).epsilon(1e-12));
  CHECK(s.alpha_bar_at(2) == Catch::Approx(0.72).epsilon(1e-12));
  CHECK(s.sigma_at(1) == 0.0);

  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + static_cast<int>(rng.next_u64() % 64);
    const double bmax = 0.05 + 0.4 * rng.uniform01();
    auto sc = build_noise_schedule(K, 1e-4, bmax);
    CHECK(sc.sigma_at(1) == 0.0);
    for (int k = 2; k <= K; ++k) {
      CHECK(sc.alpha_bar_at(k) < sc.alpha_bar_at(k - 1));
      CHECK(sc.sigma_at(k) > 0.0);
      const double expect =
          std::sqrt(sc.beta_at(k) * (1.0 - sc.alpha_bar_at(k - 1)) / (1.0 - sc.alpha_bar_at(k)));
      CHECK(sc.sigma_at(k) == Catch::Approx(expect).epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(build_noise_schedule(0), std::invalid_argument);
  CHECK_THROWS_AS(build_noise_schedule(4, 0.0, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(build_noise_schedule(4, 0.2, 0.1), std::invalid_argument);
}

TEST_CASE("policy validation rejects malformed mixtures", "[policy]") {
  auto p = standard_normal_policy(2, 2);
  CHECK_NOTHROW(validate_policy(p));
  auto bad = p;
  bad.components[0].weight = 0.5;
  CHECK_THROWS_AS(validate_policy(bad), std::invalid_argument);
  bad = p;
  bad.components[0].diag_cov[1] = 1e-9;
  CHECK_THROWS_AS(validate_policy(bad), std::invalid_argument);
  bad = p;
  bad.components[0].mean.pop_back();
  CHECK_THROWS_AS(validate_policy(bad), std::invalid_argument);
}

TEST_CASE("epsilon closed forms for single Gaussians", "[policy]") {
  auto sched = build_noise_schedule(16, 1e-4, 0.3);
  auto p = standard_normal_policy(2, 3);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    ActionChunk a = gaussian_chunk(2, 3, rng);
    const int k = 1 + static_cast<int>(rng.next_u64() % 16);
    const double scale = std::sqrt(1.0 - sched.alpha_bar_at(k));
    const ActionChunk eps = epsilon_analytic(p, a, k, sched);
    for (int i = 0; i < a.size(); ++i) CHECK(eps[i] == Catch::Approx(scale * a[i]).margin(1e-12));
  }

  // zero prediction at the scaled component mean of an isotropic component
  GaussianMixturePolicy q = standard_normal_policy(1, 4);
  for (auto& m : q.components[0].mean) m = 0.7;
  for (auto& v : q.components[0].diag_cov) v = 0.3;
  const int k = 9;
  ActionChunk at_mean(1, 4);
  for (int i = 0; i < 4; ++i) at_mean[i] = std::sqrt(sched.alpha_bar_at(k)) * 0.7;
  const ActionChunk eps = epsilon_analytic(q, at_mean, k, sched);
  for (int i = 0; i < 4; ++i) CHECK(eps[i] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("epsilon matches finite differences of the noised marginal", "[policy]") {
  auto sched = build_noise_schedule(32, 1e-4, 0.3);
  Rng rng(1234);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int T = 1 + static_cast<int>(rng.next_u64() % 3);
    const int D = 1 + static_cast<int>(rng.next_u64() % 2);
    const int M = 1 + static_cast<int>(rng.next_u64() % 4);
    auto p = testutil::random_mixture(T, D, M, rng);
    ActionChunk a(T, D);
    for (int i = 0; i < a.size(); ++i) a[i] = 4.0 * rng.uniform01() - 2.0;
    const int k = 1 + static_cast<int>(rng.next_u64() % 32);
    const double ab = sched.alpha_bar_at(k);

    auto logp = [&](const std::vector<double>& x) {
      return testutil::ref_log_marginal_diffusion(p, x, ab);
    };
    const auto score_fd = testutil::fd_gradient(logp, a.v, 1e-4);
    std::vector<double> eps_fd(score_fd.size());
    for (std::size_t i = 0; i < score_fd.size(); ++i) eps_fd[i] = -std::sqrt(1.0 - ab) * score_fd[i];

    const ActionChunk eps = epsilon_analytic(p, a, k, sched);
    worst = std::max(worst, testutil::rel_error(eps.v, eps_fd));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("velocity closed forms", "[policy]") {
  // near-delta component transports straight toward its mean
  GaussianMixturePolicy p;
  p.T = 1;
  p.D = 2;
  p.components.resize(1);
  p.components[0].weight = 1.0;
  p.components[0].mean = {0.4, -0.9};
  p.components[0].diag_cov = {kCovarianceFloor, kCovarianceFloor};
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const double k = 0.2 + 0.8 * rng.uniform01();
    ActionChunk a(1, 2);
    a[0] = 2.0 * rng.uniform01() - 1.0;
    a[1] = 2.0 * rng.uniform01() - 1.0;
    const ActionChunk v = velocity_analytic(p, a, k);
    for (int i = 0; i < 2; ++i) {
      const double expect = (a[i] - p.components[0].mean[i]) / k;
      CHECK(v[i] == Catch::Approx(expect).margin(2e-3));
    }
  }

  // symmetric two-component mixture has zero velocity at the origin
  GaussianMixturePolicy sym;
  sym.T = 1;
  sym.D = 2;
  sym.components.resize(2);
  for (int m = 0; m < 2; ++m) {
    sym.components[m].weight = 0.5;
    const double sgn = m == 0 ? 1.0 : -1.0;
    sym.components[m].mean = {sgn * 1.3, sgn * -0.6};
    sym.components[m].diag_cov = {0.4, 0.7};
  }
  ActionChunk origin(1, 2, 0.0);
  for (double k : {0.15, 0.5, 0.95}) {
    const ActionChunk v = velocity_analytic(sym, origin, k);
    CHECK(v[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(v[1] == Catch::Approx(0.0).margin(1e-12));
  }

  CHECK_THROWS_AS(velocity_analytic(sym, origin, 0.0), std::domain_error);
  CHECK_THROWS_AS(velocity_analytic(sym, origin, 1.5), std::domain_error);
}

TEST_CASE("velocity matches the finite-difference score identity", "[policy]") {
  // v = -k*s - (a + k^2*s)/(1-k) with s the score of the flow-time marginal;
  // the score is taken by central differences of an independently coded density.
  Rng rng(777);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int T = 1 + static_cast<int>(rng.next_u64() % 3);
    const int D = 1 + static_cast<int>(rng.next_u64() % 2);
    const int M = 1 + static_cast<int>(rng.next_u64() % 4);
    auto p = testutil::random_mixture(T, D, M, rng);
    ActionChunk a(T, D);
    for (int i = 0; i < a.size(); ++i) a[i] = 4.0 * rng.uniform01() - 2.0;
    const double k = 0.05 + 0.85 * rng.uniform01();

    auto logp = [&](const std::vector<double>& x) { return testutil::ref_log_marginal_flow(p, x, k); };
    const auto sc = testutil::fd_gradient(logp, a.v, 1e-4);
    std::vector<double> v_fd(sc.size());
    for (std::size_t i = 0; i < sc.size(); ++i)
      v_fd[i] = -k * sc[i] - (a.v[i] + k * k * sc[i]) / (1.0 - k);

    const ActionChunk v = velocity_analytic(p, a, k);
    worst = std::max(worst, testutil::rel_error(v.v, v_fd));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("denoise and flow step mechanics", "[policy]") {
  auto sched = build_noise_schedule(1, 0.19, 0.19);
  ActionChunk a(1, 2);
  a[0] = 0.9;
  a[1] = -0.4;
  ActionChunk eps(1, 2, 0.0);
  Rng rng(5);
  const ActionChunk out = denoise_step(a, eps, 1, sched, rng);
  for (int i = 0; i < 2; ++i) CHECK(out[i] == Catch::Approx(a[i] / std::sqrt(0.81)).epsilon(1e-12));

  ActionChunk x(1, 1);
  x[0] = 1.0;
  ActionChunk v(1, 1);
  v[0] = 0.5;
  CHECK(flow_step(x, v, 0.8, 0.1)[0] == Catch::Approx(0.95).epsilon(1e-14));
  const ActionChunk half = flow_step(flow_step(x, v, 0.8, 0.05), v, 0.75, 0.05);
  CHECK(half[0] == Catch::Approx(flow_step(x, v, 0.8, 0.1)[0]).epsilon(1e-14));

  ActionChunk wrong(2, 1);
  CHECK_THROWS_AS(denoise_step(a, wrong, 1, sched, rng), std::invalid_argument);
  CHECK_THROWS_AS(flow_step(x, wrong, 0.5, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(flow_step(x, v, 0.5, 0.0), std::invalid_argument);
}

TEST_CASE("unguided sampling passes a moment test", "[policy][slow]") {
  GaussianMixturePolicy p;
  p.T = 1;
  p.D = 2;
  p.components.resize(1);
  p.components[0].weight = 1.0;
  p.components[0].mean = {0.7, -0.3};
  p.components[0].diag_cov = {0.49, 0.25};
  auto sched = build_noise_schedule(256, 1e-4, 0.12);
  Rng rng(2024);
  const int B = 4096;
  auto samples = sample_unguided(p, B, sched, rng);

  for (int d = 0; d < 2; ++d) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s[d];
    mean /= B;
    const double sd = std::sqrt(p.components[0].diag_cov[d]);
    const double se_mean = sd / std::sqrt(static_cast<double>(B));
    CHECK(std::abs(mean - p.components[0].mean[d]) < 5.0 * se_mean);

    double var = 0.0;
    for (const auto& s : samples) var += (s[d] - mean) * (s[d] - mean);
    var /= (B - 1);
    const double se_var = p.components[0].diag_cov[d] * std::sqrt(2.0 / B);
    CHECK(std::abs(var - p.components[0].diag_cov[d]) < 5.0 * se_var + 0.06 * p.components[0].diag_cov[d]);
  }
}

TEST_CASE("flow and diffusion samplers agree on the mean", "[policy][slow]") {
  GaussianMixturePolicy p;
  p.T = 1;
  p.D = 2;
  p.components.resize(1);
  p.components[0].weight = 1.0;
  p.components[0].mean = {0.5, -0.8};
  p.components[0].diag_cov = {0.36, 0.16};
  auto sched = build_noise_schedule(256, 1e-4, 0.12);
  Rng r1(11), r2(12);
  const int B = 4096;
  auto ds = sample_unguided(p, B, sched, r1);
  auto fs = sample_unguided_flow(p, B, 256, r2);
  for (int d = 0; d < 2; ++d) {
    double md = 0.0, mf = 0.0;
    for (const auto& s : ds) md += s[d];
    for (const auto& s : fs) mf += s[d];
    md /= B;
    mf /= B;
    const double se = std::sqrt(p.components[0].diag_cov[d] / B);
    CHECK(std::abs(md - mf) < 8.0 * se);
  }
}

TEST_CASE("EM closed form for one component", "[policy]") {
  Rng rng(99);
  std::vector<ActionChunk> demos;
  for (int i = 0; i < 40; ++i) {
    ActionChunk c(2, 2);
    for (int j = 0; j < 4; ++j) c[j] = 0.3 * j + 0.25 * rng.normal();
    demos.push_back(c);
  }
  Rng fit_rng(1);
  auto res = fit_gmm_em(demos, 1, 3, fit_rng);
  const auto& comp = res.policy.components[0];
  for (int j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (const auto& d : demos) mean += d[j];
    mean /= demos.size();
    double var = 0.0;
    for (const auto& d : demos) var += (d[j] - mean) * (d[j] - mean);
    var /= demos.size();
    CHECK(comp.mean[j] == Catch::Approx(mean).margin(1e-10));
    CHECK(comp.diag_cov[j] == Catch::Approx(var).margin(1e-10));
  }
}

TEST_CASE("EM log-likelihood is nondecreasing and recovers two clusters", "[policy]") {
  Rng rng(4242);
  std::vector<ActionChunk> demos;
  for (int i = 0; i < 120; ++i) {
    ActionChunk c(1, 2);
    const bool left = i % 2 == 0;
    c[0] = (left ? -2.0 : 2.0) + 0.3 * rng.normal();
    c[1] = (left ? 1.0 : -1.0) + 0.3 * rng.normal();
    demos.push_back(c);
  }
  Rng fit_rng(7);
  auto res = fit_gmm_em(demos, 2, 40, fit_rng);
  for (std::size_t i = 1; i < res.log_likelihood.size(); ++i)
    CHECK(res.log_likelihood[i] >= res.log_likelihood[i - 1] - 1e-7 * std::abs(res.log_likelihood[i - 1]) - 1e-9);

  auto& c0 = res.policy.components[0];
  auto& c1 = res.policy.components[1];
  const bool c0_left = c0.mean[0] < 0.0;
  const auto& left = c0_left ? c0 : c1;
  const auto& right = c0_left ? c1 : c0;
  CHECK(left.mean[0] == Catch::Approx(-2.0).margin(0.15));
  CHECK(left.mean[1] == Catch::Approx(1.0).margin(0.15));
  CHECK(right.mean[0] == Catch::Approx(2.0).margin(0.15));
  CHECK(right.mean[1] == Catch::Approx(-1.0).margin(0.15));
  CHECK(left.weight == Catch::Approx(0.5).margin(0.1));
}

TEST_CASE("EM input validation", "[policy]") {
  Rng rng(1);
  std::vector<ActionChunk> demos;
  CHECK_THROWS_AS(fit_gmm_em(demos, 1, 5, rng), std::invalid_argument);
  demos.emplace_back(1, 2, 0.0);
  CHECK_THROWS_AS(fit_gmm_em(demos, 2, 5, rng), std::invalid_argument);
  demos.emplace_back(2, 2, 0.0);
  CHECK_THROWS_AS(fit_gmm_em(demos, 1, 5, rng), std::invalid_argument);
}

TEST_CASE("rng substreams are draw-independent and deterministic", "[policy]") {
  Rng a(123);
  Rng b(123);
  (void)b.normal();
  (void)b.normal();
  Rng ca = a.child(5);
  Rng cb = b.child(5);
  for (int i = 0; i < 16; ++i) CHECK(ca.next_u64() == cb.next_u64());

  Rng n(55);
  double mean = 0.0, var = 0.0;
  const int N = 20000;
  std::vector<double> xs(N);
  for (auto& x : xs) x = n.normal();
  for (double x : xs) mean += x;
  mean /= N;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= (N - 1);
  CHECK(std::abs(mean) < 5.0 / std::sqrt(static_cast<double>(N)));
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / N));
}
