#include <gtest/gtest.h>

#include <cmath>

#include "rdbm/bridge.hpp"
#include "rdbm/sde_sim.hpp"

using namespace rdbm;

namespace {

ScheduleSpec theta2() { return ScheduleSpec::constant_rate(2.0, 1.0, 10, 0.5); }

SimConfig small(std::size_t n = 20000) {
  SimConfig c;
  c.trajectories = n;
  c.substeps_per_cell = 16;
  return c;
}

}  // namespace

TEST(EulerMaruyama, ZeroPiIsDeterministic) {
  for (bool rich : {true, false}) {
    auto cfg = small(5000);
    cfg.richardson = rich;
    const auto est = euler_maruyama_forward(ScheduleSpec{}, 0.9, 0.2, 0.0, cfg);
    for (const auto& m : est) {
      EXPECT_EQ(m.var, 0.0);
      EXPECT_EQ(m.mean_se, 0.0);
    }
  }
}

TEST(EulerMaruyama, StopsBeforeHorizon) {
  const auto est = euler_maruyama_forward(ScheduleSpec{}, 0.9, 0.2, 1.0, small(2000));
  ASSERT_EQ(est.size(), 10u);
  EXPECT_EQ(est.front().t, 0.0);
  EXPECT_DOUBLE_EQ(est.back().t, 0.9);
  EXPECT_EQ(est.front().mean, 0.9);
  EXPECT_EQ(est.front().var, 0.0);
}

TEST(EulerMaruyama, FixedPointMeanWhenX0EqualsMu) {
  const auto est = euler_maruyama_forward(ScheduleSpec{}, 0.4, 0.4, 1.0, small());
  for (const auto& m : est) EXPECT_LE(std::abs(m.mean - 0.4), 4.0 * m.mean_se + 1e-15) << m.t;
}

TEST(EulerMaruyama, ConstantThetaExample) {
  auto cfg = small(100000);
  cfg.substeps_per_cell = 64;
  const auto est = euler_maruyama_forward(theta2(), 1.0, 0.0, 1.0, cfg);
  const auto c = compute_coefficients(theta2());
  const auto& m = est[5];
  EXPECT_DOUBLE_EQ(m.t, 0.5);
  EXPECT_LE(std::abs(m.mean - c.Theta[5]), 4.0 * m.mean_se);
  const double var = c.Sigma[5] * c.Sigma[5];
  EXPECT_LE(std::abs(m.var - var), std::max(0.02 * var, 4.0 * m.var_se));
}

TEST(EulerMaruyama, WorkerCountDoesNotChangeResults) {
  auto one = small(9000);
  one.workers = 1;
  auto three = one;
  three.workers = 3;
  const auto a = euler_maruyama_forward(ScheduleSpec{}, 1.0, 0.0, 0.7, one);
  const auto b = euler_maruyama_forward(ScheduleSpec{}, 1.0, 0.0, 0.7, three);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mean, b[i].mean);
    EXPECT_EQ(a[i].var, b[i].var);
    EXPECT_EQ(a[i].mean_se, b[i].mean_se);
  }
}

TEST(EulerMaruyama, SeedChangesEstimate) {
  auto a = small(3000), b = small(3000);
  b.seed = 43;
  EXPECT_NE(euler_maruyama_forward(ScheduleSpec{}, 1.0, 0.0, 1.0, a)[5].mean,
            euler_maruyama_forward(ScheduleSpec{}, 1.0, 0.0, 1.0, b)[5].mean);
}

TEST(EulerMaruyama, RichardsonCutsPlainBias) {
  // Noise-free path: the mean error of each estimator is pure discretisation bias.
  auto cfg = small(10);
  cfg.substeps_per_cell = 8;
  const auto sp = theta2();
  const auto c = compute_coefficients(sp);
  cfg.richardson = false;
  const auto plain = euler_maruyama_forward(sp, 1.0, 0.0, 0.0, cfg);
  cfg.richardson = true;
  const auto rich = euler_maruyama_forward(sp, 1.0, 0.0, 0.0, cfg);
  for (std::size_t i = 1; i < plain.size(); ++i) {
    EXPECT_LT(std::abs(rich[i].mean - c.Theta[i]), 0.1 * std::abs(plain[i].mean - c.Theta[i])) << i;
  }
}

TEST(SimConfig, Validation) {
  SimConfig c;
  c.trajectories = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.substeps_per_cell = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.endpoint_clip = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TreeReduce, MatchesSequentialCount) {
  std::vector<detail::PowerSums> parts(7);
  for (std::size_t k = 0; k < parts.size(); ++k) parts[k].add(static_cast<double>(k));
  const auto t = detail::tree_reduce(parts, 0, parts.size());
  EXPECT_EQ(t.n, 7.0);
  EXPECT_EQ(t.a1, 21.0);
  EXPECT_EQ(t.a2, 91.0);
}

TEST(ExactTransition, EndpointsAndMoments) {
  const auto c = compute_coefficients(theta2());
  RandomStream rng(9, 9);
  EXPECT_EQ(exact_transition_sample(c, 1.0, 0.0, 1.0, 10, rng), 0.0);
  EXPECT_EQ(exact_transition_sample(c, 1.0, 0.0, 1.0, 0, rng), 1.0);
  const int n = 200000;
  double s1 = 0, s2 = 0;
  for (int k = 0; k < n; ++k) {
    const double x = exact_transition_sample(c, 1.0, 0.0, 1.0, 5, rng);
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  const double want_var = c.Sigma[5] * c.Sigma[5];
  EXPECT_LE(std::abs(mean - c.Theta[5]), 4.0 * std::sqrt(want_var / n));
  EXPECT_LE(std::abs(var - want_var), 0.02 * want_var);
}

TEST(PosteriorOracle, ZeroInnovationGivesPriorMean) {
  const auto c = compute_coefficients(ScheduleSpec{});
  const double x0 = 0.8, mu = 0.1, pi = x0 - mu;
  for (std::size_t i = 2; i < c.steps(); ++i) {
    const double x_t = mu + (x0 - mu) * c.Theta[i];
    const auto m = posterior_oracle(c, i, x0, mu, pi, x_t);
    EXPECT_NEAR(m.mean, mu + (x0 - mu) * c.Theta[i - 1], 1e-14);
  }
}

TEST(PosteriorOracle, FirstStepCollapsesToX0) {
  const auto c = compute_coefficients(ScheduleSpec{});
  const auto m = posterior_oracle(c, 1, 0.8, 0.1, 0.7, 0.5);
  EXPECT_EQ(m.var, 0.0);
  EXPECT_DOUBLE_EQ(m.mean, 0.8);
}

TEST(PosteriorOracle, VarianceMatchesClosedForm) {
  RandomStream rng(3, 3);
  for (auto f : {ScheduleFamily::constant, ScheduleFamily::linear, ScheduleFamily::cosine}) {
    ScheduleSpec sp;
    sp.family = f;
    if (f == ScheduleFamily::constant) sp.theta_max = sp.theta_min = 0.7;
    const auto c = compute_coefficients(sp);
    for (std::size_t i = 2; i < c.steps(); ++i) {
      const double x0 = rng.uniform(), mu = rng.uniform(), pi = x0 - mu, x_t = rng.uniform();
      const double tp = c.Theta[i - 1], tc = c.Theta[i], sp2 = c.Sigma[i - 1] * c.Sigma[i - 1],
                   sc2 = c.Sigma[i] * c.Sigma[i];
      const double want = pi * pi * sp2 * (tp * tp * sc2 - tc * tc * sp2) / (tp * tp * sc2);
      const auto m = posterior_oracle(c, i, x0, mu, pi, x_t);
      EXPECT_LE(std::abs(m.var - want), 1e-10 * want);
    }
  }
}

TEST(PosteriorOracle, IndexErrors) {
  const auto c = compute_coefficients(ScheduleSpec{});
  EXPECT_THROW(posterior_oracle(c, 0, 0, 0, 1, 0), DomainError);
  EXPECT_THROW(posterior_oracle(c, 11, 0, 0, 1, 0), DomainError);
}
