#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdbm/errors.hpp"

namespace rdbm {

enum class ScheduleFamily { linear, cosine, sigmoid, constant };

inline std::string_view to_string(ScheduleFamily f) {
  switch (f) {
    case ScheduleFamily::linear: return "linear";
    case ScheduleFamily::cosine: return "cosine";
    case ScheduleFamily::sigmoid: return "sigmoid";
    case ScheduleFamily::constant: return "constant";
  }
  return "?";
}

inline ScheduleFamily parse_family(std::string_view name) {
  if (name == "linear") return ScheduleFamily::linear;
  if (name == "cosine") return ScheduleFamily::cosine;
  if (name == "sigmoid") return ScheduleFamily::sigmoid;
  if (name == "constant") return ScheduleFamily::constant;
  throw std::invalid_argument("unknown schedule family '" + std::string(name) + "'");
}

inline constexpr double kDefaultLambda = 10.0 / 255.0;

// Mean-reversion rate schedule theta_t on [0, T], the stationary variance
// scale lambda, and the uniform grid of N cells used for training/sampling.
struct ScheduleSpec {
  ScheduleFamily family = ScheduleFamily::cosine;
  double theta_min = 0.01;
  double theta_max = 1.0;
  double horizon = 1.0;
  std::size_t steps = 10;
  double lambda = kDefaultLambda;

  static ScheduleSpec constant_rate(double theta, double horizon = 1.0, std::size_t steps = 10,
                                    double lambda = kDefaultLambda) {
    return {ScheduleFamily::constant, theta, theta, horizon, steps, lambda};
  }

  void validate() const {
    if (!(theta_min >= 0.0) || !std::isfinite(theta_min)) {
      throw std::invalid_argument("schedule: theta_min must be finite and >= 0");
    }
    if (family != ScheduleFamily::constant && !(theta_max >= theta_min && std::isfinite(theta_max))) {
      throw std::invalid_argument("schedule: theta_max must be finite and >= theta_min");
    }
    if (!(horizon > 0.0) || !std::isfinite(horizon)) {
      throw std::invalid_argument("schedule: T must be > 0");
    }
    if (steps < 2) throw std::invalid_argument("schedule: N must be >= 2");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
      throw std::invalid_argument("schedule: lambda must be > 0");
    }
  }

  double grid_time(std::size_t i) const {
    return i == steps ? horizon : horizon * static_cast<double>(i) / static_cast<double>(steps);
  }
};

inline void to_json(nlohmann::json& j, const ScheduleSpec& s) {
  j = nlohmann::json{{"family", std::string(to_string(s.family))},
                     {"theta_min", s.theta_min},
                     {"theta_max", s.theta_max},
                     {"T", s.horizon},
                     {"N", s.steps},
                     {"lambda", s.lambda}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ScheduleSpec& s) {
  if (!j.is_object()) throw std::invalid_argument("schedule config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "family") {
      s.family = parse_family(value.get<std::string>());
    } else if (key == "theta_min") {
      s.theta_min = value.get<double>();
    } else if (key == "theta_max") {
      s.theta_max = value.get<double>();
    } else if (key == "T") {
      s.horizon = value.get<double>();
    } else if (key == "N") {
      const auto n = value.get<long long>();
      if (n < 2) throw std::invalid_argument("schedule: N must be >= 2");
      s.steps = static_cast<std::size_t>(n);
    } else if (key == "lambda") {
      s.lambda = value.get<double>();
    } else {
      throw std::invalid_argument("schedule config: unknown key '" + key + "'");
    }
  }
  if (s.family == ScheduleFamily::constant && !j.contains("theta_max")) s.theta_max = s.theta_min;
  s.validate();
}

namespace detail {

inline constexpr std::size_t kSimpsonPanelsPerCell = 32;

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Sigmoid ramp renormalised so that it hits exactly 0 at t = 0 and 1 at t = T.
inline double sigmoid_ramp(double u) {
  constexpr double k = 12.0;
  const double lo = logistic(-0.5 * k);
  const double hi = logistic(0.5 * k);
  return (logistic(k * (u - 0.5)) - lo) / (hi - lo);
}

inline double theta_unchecked(const ScheduleSpec& spec, double t) {
  const double u = t / spec.horizon;
  const double span = spec.theta_max - spec.theta_min;
  switch (spec.family) {
    case ScheduleFamily::constant: return spec.theta_min;
    case ScheduleFamily::linear: return spec.theta_min + span * u;
    case ScheduleFamily::cosine: return spec.theta_min + span * 0.5 * (1.0 - std::cos(std::numbers::pi * u));
    case ScheduleFamily::sigmoid: return spec.theta_min + span * sigmoid_ramp(u);
  }
  return 0.0;
}

inline double simpson(const ScheduleSpec& spec, double a, double b, std::size_t panels) {
  if (b <= a) return 0.0;
  const double h = (b - a) / static_cast<double>(panels);
  double odd = 0.0;
  double even = 0.0;
  for (std::size_t k = 1; k < panels; ++k) {
    const double v = theta_unchecked(spec, a + h * static_cast<double>(k));
    (k % 2 ? odd : even) += v;
  }
  return h / 3.0 * (theta_unchecked(spec, a) + 4.0 * odd + 2.0 * even + theta_unchecked(spec, b));
}

inline bool has_closed_form(ScheduleFamily f) {
  return f == ScheduleFamily::constant || f == ScheduleFamily::linear;
}

inline double cell_index_floor(const ScheduleSpec& spec, double t) {
  return std::floor(t / spec.horizon * static_cast<double>(spec.steps));
}

// Integral of theta over [0, t]. Quadrature families sum whole grid cells
// first and then the partial cell, so differences F(t) - F(s) are additive.
inline double cumulative_from_zero(const ScheduleSpec& spec, double t) {
  if (t <= 0.0) return 0.0;
  switch (spec.family) {
    case ScheduleFamily::constant: return spec.theta_min * t;
    case ScheduleFamily::linear:
      return spec.theta_min * t + 0.5 * (spec.theta_max - spec.theta_min) * t * t / spec.horizon;
    default: break;
  }
  const auto full = static_cast<std::size_t>(
      std::min(cell_index_floor(spec, t), static_cast<double>(spec.steps)));
  double acc = 0.0;
  for (std::size_t c = 0; c < full; ++c) {
    acc += simpson(spec, spec.grid_time(c), spec.grid_time(c + 1), kSimpsonPanelsPerCell);
  }
  if (full < spec.steps) acc += simpson(spec, spec.grid_time(full), t, kSimpsonPanelsPerCell);
  return acc;
}

inline void check_time(const ScheduleSpec& spec, double t, const char* what) {
  if (!(t >= 0.0 && t <= spec.horizon)) {
    throw DomainError(std::string(what) + ": t = " + std::to_string(t) + " outside [0, T]");
  }
}

}  // namespace detail

inline double theta_at(const ScheduleSpec& spec, double t) {
  detail::check_time(spec, t, "theta_at");
  return detail::theta_unchecked(spec, t);
}

// Integral of theta over [s, t]: exact for constant/linear, composite
// Simpson (32 panels per grid cell) otherwise.
inline double cumulative_theta(const ScheduleSpec& spec, double s, double t) {
  detail::check_time(spec, s, "cumulative_theta");
  detail::check_time(spec, t, "cumulative_theta");
  if (s > t) throw DomainError("cumulative_theta: s > t");
  if (s == t) return 0.0;
  if (spec.family == ScheduleFamily::constant) return spec.theta_min * (t - s);
  return std::max(0.0, detail::cumulative_from_zero(spec, t) - detail::cumulative_from_zero(spec, s));
}

struct ScheduleTable {
  ScheduleSpec spec;
  std::vector<double> t_grid;
  std::vector<double> theta;
  std::vector<double> cum0;  // integral of theta over [0, t_i]
  double total = 0.0;        // integral over [0, T]

  std::size_t steps() const noexcept { return spec.steps; }

  double cum_to_end(std::size_t i) const { return std::max(0.0, total - cum0[i]); }

  // Integral over [0, t] for arbitrary t, reusing the cached cell sums.
  double cum_from_zero(double t) const {
    if (t <= 0.0) return 0.0;
    if (t >= spec.horizon) return total;
    if (detail::has_closed_form(spec.family)) return detail::cumulative_from_zero(spec, t);
    const auto cell = static_cast<std::size_t>(detail::cell_index_floor(spec, t));
    return cum0[cell] + detail::simpson(spec, t_grid[cell], t, detail::kSimpsonPanelsPerCell);
  }

  double cum_between(double s, double t) const { return std::max(0.0, cum_from_zero(t) - cum_from_zero(s)); }
};

inline ScheduleTable build_table(const ScheduleSpec& spec) {
  spec.validate();
  const std::size_t n = spec.steps;
  ScheduleTable table;
  table.spec = spec;
  table.t_grid.resize(n + 1);
  table.theta.resize(n + 1);
  table.cum0.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    table.t_grid[i] = spec.grid_time(i);
    table.theta[i] = detail::theta_unchecked(spec, table.t_grid[i]);
    if (detail::has_closed_form(spec.family) || i == 0) {
      table.cum0[i] = detail::cumulative_from_zero(spec, table.t_grid[i]);
    } else {
      // Same summation order as cumulative_from_zero, so the two agree bitwise.
      table.cum0[i] = table.cum0[i - 1] + detail::simpson(spec, table.t_grid[i - 1], table.t_grid[i],
                                                          detail::kSimpsonPanelsPerCell);
    }
  }
  table.total = table.cum0[n];
  return table;
}

}  // namespace rdbm
