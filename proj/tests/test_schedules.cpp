#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "rdbm/errors.hpp"
#include "rdbm/random.hpp"
#include "rdbm/schedules.hpp"

using namespace rdbm;

namespace {

ScheduleSpec ramp(ScheduleFamily f, double lo = 0.0, double hi = 1.0, std::size_t n = 10) {
  ScheduleSpec s;
  s.family = f;
  s.theta_min = lo;
  s.theta_max = hi;
  s.steps = n;
  return s;
}

double trapezoid(const ScheduleSpec& s, double a, double b, std::size_t panels) {
  const double h = (b - a) / static_cast<double>(panels);
  double acc = 0.5 * (theta_at(s, a) + theta_at(s, b));
  for (std::size_t k = 1; k < panels; ++k) acc += theta_at(s, a + h * static_cast<double>(k));
  return acc * h;
}

const ScheduleFamily kFamilies[] = {ScheduleFamily::constant, ScheduleFamily::linear, ScheduleFamily::cosine,
                                    ScheduleFamily::sigmoid};

}  // namespace

TEST(ThetaAt, Examples) {
  EXPECT_EQ(theta_at(ScheduleSpec::constant_rate(2.0), 0.3), 2.0);
  EXPECT_DOUBLE_EQ(theta_at(ramp(ScheduleFamily::linear), 0.5), 0.5);
  EXPECT_NEAR(theta_at(ramp(ScheduleFamily::cosine), 0.5), 0.5, 1e-15);
}

TEST(ThetaAt, EndpointsExact) {
  for (auto f : {ScheduleFamily::linear, ScheduleFamily::cosine, ScheduleFamily::sigmoid}) {
    const auto s = ramp(f, 0.01, 1.0);
    EXPECT_NEAR(theta_at(s, 0.0), 0.01, 1e-15) << to_string(f);
    EXPECT_NEAR(theta_at(s, 1.0), 1.0, 1e-15) << to_string(f);
  }
}

TEST(ThetaAt, OutsideHorizonIsDomainError) {
  const ScheduleSpec s;
  EXPECT_THROW(theta_at(s, -1e-9), DomainError);
  EXPECT_THROW(theta_at(s, 1.0 + 1e-9), DomainError);
}

TEST(CumulativeTheta, Examples) {
  EXPECT_DOUBLE_EQ(cumulative_theta(ScheduleSpec::constant_rate(2.0), 0.0, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(cumulative_theta(ramp(ScheduleFamily::linear), 0.0, 1.0), 0.5);
  EXPECT_NEAR(cumulative_theta(ramp(ScheduleFamily::cosine), 0.0, 1.0), 0.5, 1e-12);
  EXPECT_EQ(cumulative_theta(ScheduleSpec{}, 0.3, 0.3), 0.0);
}

TEST(CumulativeTheta, ReversedIntervalIsDomainError) {
  EXPECT_THROW(cumulative_theta(ScheduleSpec{}, 0.6, 0.5), DomainError);
}

TEST(CumulativeTheta, AdditiveOverRandomPartitions) {
  RandomStream rng(1, 1);
  for (auto f : kFamilies) {
    const auto s = ramp(f, 0.05, 1.7, 13);
    for (int trial = 0; trial < 200; ++trial) {
      double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
      if (a > b) std::swap(a, b);
      if (b > c) std::swap(b, c);
      if (a > b) std::swap(a, b);
      const double whole = cumulative_theta(s, a, c);
      const double parts = cumulative_theta(s, a, b) + cumulative_theta(s, b, c);
      ASSERT_LE(std::abs(whole - parts), 1e-12 * std::max(whole, 1e-300)) << to_string(f) << " " << a << " " << c;
    }
  }
}

TEST(CumulativeTheta, MonotoneInUpperLimit) {
  for (auto f : kFamilies) {
    const auto s = ramp(f, 0.0, 1.0, 7);
    double prev = 0.0;
    for (int k = 0; k <= 500; ++k) {
      const double v = cumulative_theta(s, 0.1, std::max(0.1, k / 500.0));
      ASSERT_GE(v, prev);
      ASSERT_GE(v, 0.0);
      prev = v;
    }
  }
}

TEST(CumulativeTheta, SimpsonMatchesFineTrapezoid) {
  for (auto f : {ScheduleFamily::linear, ScheduleFamily::cosine, ScheduleFamily::sigmoid}) {
    const auto s = ramp(f, 0.01, 1.0, 10);
    const double simpson = cumulative_theta(s, 0.0, 1.0);
    const double trap = trapezoid(s, 0.0, 1.0, 64 * 32 * s.steps);
    EXPECT_LE(std::abs(simpson - trap), 1e-9 * trap) << to_string(f);
  }
}

TEST(BuildTable, ConstantExample) {
  auto s = ScheduleSpec::constant_rate(1.0);
  s.steps = 4;
  const auto t = build_table(s);
  const std::vector<double> expect{0, 0.25, 0.5, 0.75, 1.0};
  ASSERT_EQ(t.cum0.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(t.cum0[i], expect[i]);
}

TEST(BuildTable, LinearMidpoint) {
  EXPECT_DOUBLE_EQ(build_table(ramp(ScheduleFamily::linear)).cum0[5], 0.125);
}

TEST(BuildTable, Invariants) {
  for (auto f : kFamilies) {
    for (std::size_t n : {2u, 10u, 50u, 1000u}) {
      const auto s = ramp(f, 0.01, 1.0, n);
      const auto t = build_table(s);
      ASSERT_EQ(t.t_grid.size(), n + 1);
      EXPECT_EQ(t.cum0[0], 0.0);
      EXPECT_EQ(t.cum0[n], t.total);
      EXPECT_EQ(t.t_grid[n], s.horizon);
      for (std::size_t i = 0; i <= n; ++i) {
        if (i) ASSERT_GE(t.cum0[i], t.cum0[i - 1]);
        ASSERT_GE(t.cum_to_end(i), 0.0);
        const double direct = cumulative_theta(s, 0.0, t.t_grid[i]);
        ASSERT_LE(std::abs(t.cum0[i] - direct), 1e-12 * std::max(direct, 1e-300));
      }
    }
  }
}

TEST(BuildTable, TableLookupMatchesDirectIntegral) {
  RandomStream rng(2, 2);
  const auto s = ramp(ScheduleFamily::sigmoid, 0.01, 1.0, 10);
  const auto t = build_table(s);
  for (int k = 0; k < 100; ++k) {
    const double u = rng.uniform();
    EXPECT_NEAR(t.cum_from_zero(u), cumulative_theta(s, 0.0, u), 1e-14);
  }
}

TEST(ScheduleSpec, ValidationRejectsBadInput) {
  auto bad = [](auto mutate) {
    ScheduleSpec s;
    mutate(s);
    return s;
  };
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.theta_min = -1; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.theta_max = 0.001; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.horizon = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.steps = 1; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.lambda = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](ScheduleSpec& s) { s.theta_min = NAN; }).validate(), std::invalid_argument);
}

TEST(ScheduleSpec, JsonRoundTrip) {
  auto s = ramp(ScheduleFamily::sigmoid, 0.02, 1.5, 25);
  s.lambda = 0.25;
  s.horizon = 2.0;
  nlohmann::json j = s;
  const auto back = j.get<ScheduleSpec>();
  EXPECT_EQ(back.family, s.family);
  EXPECT_EQ(back.theta_min, s.theta_min);
  EXPECT_EQ(back.theta_max, s.theta_max);
  EXPECT_EQ(back.horizon, s.horizon);
  EXPECT_EQ(back.steps, s.steps);
  EXPECT_EQ(back.lambda, s.lambda);
}

TEST(ScheduleSpec, JsonRejectsUnknownKeysAndFamilies) {
  EXPECT_THROW(nlohmann::json({{"family", "cosine"}, {"thetamin", 1}}).get<ScheduleSpec>(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"family", "quadratic"}}).get<ScheduleSpec>(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"N", 1}}).get<ScheduleSpec>(), std::invalid_argument);
}

TEST(ScheduleSpec, ConstantJsonCopiesThetaMin) {
  const auto s = nlohmann::json({{"family", "constant"}, {"theta_min", 2.0}}).get<ScheduleSpec>();
  EXPECT_EQ(s.theta_max, 2.0);
  EXPECT_EQ(theta_at(s, 0.7), 2.0);
}
