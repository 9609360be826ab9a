#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "rdbm/errors.hpp"
#include "rdbm/schedules.hpp"
#include "rdbm/tensor.hpp"

namespace rdbm {

// log(sinh(a)) for a >= 0 without overflow for large a or cancellation near 0.
inline double log_sinh(double a) {
  if (a < 0.0) throw DomainError("log_sinh: negative argument");
  if (a == 0.0) return -std::numeric_limits<double>::infinity();
  if (a > 1e-3) return a + std::log1p(-std::exp(-2.0 * a)) - std::numbers::ln2;
  return std::log(a) + std::log1p(a * a / 6.0);
}

inline double coth(double a) { return 1.0 / std::tanh(a); }

// Closed-form bridge coefficients on the schedule grid:
//   Theta_i   = sinh(cum(t_i, T)) / sinh(cum(0, T))
//   Sigma_i^2 = 2 lambda sinh(cum(0, t_i)) sinh(cum(t_i, T)) / sinh(cum(0, T))
//   R_i       = sinh(cum(t_i, T)) / (sinh(cum(0, t_i)) sinh(cum(0, T)))
// The terminal_* pair holds the same coefficients at the virtual time
// T - T/(2N), used by the first reverse step where Theta_N = 0.
struct BridgeCoefficients {
  std::vector<double> t;
  std::vector<double> cum0;
  std::vector<double> theta_rate;
  std::vector<double> Theta;
  std::vector<double> Sigma;
  std::vector<double> R;
  double lambda = 0.0;
  double horizon = 1.0;
  double terminal_time = 0.0;
  double terminal_Theta = 0.0;
  double terminal_Sigma = 0.0;

  std::size_t steps() const noexcept { return Theta.empty() ? 0 : Theta.size() - 1; }

  void check_index(std::size_t i, const char* what) const {
    if (i > steps()) {
      throw DomainError(std::string(what) + ": grid index " + std::to_string(i) + " outside [0, " +
                        std::to_string(steps()) + "]");
    }
  }
};

namespace detail {

struct PointCoefficients {
  double Theta;
  double Sigma;
  double R;
};

inline PointCoefficients coefficients_at(double cum_0t, double cum_tT, double total, double lambda) {
  const double log_total = log_sinh(total);
  const double log_tail = log_sinh(cum_tT);
  const double log_head = log_sinh(cum_0t);
  PointCoefficients p{};
  p.Theta = std::exp(log_tail - log_total);
  p.Sigma = std::sqrt(2.0 * lambda) * std::exp(0.5 * (log_head + log_tail - log_total));
  p.R = cum_0t == 0.0 ? std::numeric_limits<double>::infinity()
                      : std::exp(log_tail - log_head - log_total);
  return p;
}

}  // namespace detail

inline BridgeCoefficients compute_coefficients(const ScheduleTable& table, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("compute_coefficients: lambda must be > 0");
  if (!(table.total > 0.0)) {
    throw DegenerateScheduleError("compute_coefficients: theta integrates to zero over [0, T]");
  }
  const std::size_t n = table.steps();
  BridgeCoefficients c;
  c.t = table.t_grid;
  c.cum0 = table.cum0;
  c.theta_rate = table.theta;
  c.lambda = lambda;
  c.horizon = table.spec.horizon;
  c.Theta.resize(n + 1);
  c.Sigma.resize(n + 1);
  c.R.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const auto p = detail::coefficients_at(table.cum0[i], table.cum_to_end(i), table.total, lambda);
    c.Theta[i] = p.Theta;
    c.Sigma[i] = p.Sigma;
    c.R[i] = p.R;
  }
  c.Theta[0] = 1.0;
  c.Sigma[0] = 0.0;
  c.Theta[n] = 0.0;
  c.Sigma[n] = 0.0;
  c.R[n] = 0.0;

  c.terminal_time = table.spec.horizon - table.spec.horizon / (2.0 * static_cast<double>(n));
  const double head = table.cum_from_zero(c.terminal_time);
  const auto p = detail::coefficients_at(head, std::max(0.0, table.total - head), table.total, lambda);
  c.terminal_Theta = p.Theta;
  c.terminal_Sigma = p.Sigma;
  return c;
}

inline BridgeCoefficients compute_coefficients(const ScheduleSpec& spec) {
  return compute_coefficients(build_table(spec), spec.lambda);
}

// pi = x0 - mu, or |x0 - mu| when absolute is set.
inline TensorGrid residual(const TensorGrid& x0, const TensorGrid& mu, bool absolute = false) {
  return map_elements(
      "residual", [absolute](double a, double b) { return absolute ? std::abs(a - b) : a - b; }, x0, mu);
}

// x_i = mu + (x0 - mu) Theta_i + pi * Sigma_i * eps. Endpoints are returned
// verbatim so that x_0 == x0 and x_N == mu hold bitwise.
inline TensorGrid forward_sample(const TensorGrid& x0, const TensorGrid& mu, const TensorGrid& pi,
                                 const BridgeCoefficients& coeffs, std::size_t i, const TensorGrid& eps) {
  coeffs.check_index(i, "forward_sample");
  require_same_shape(x0, mu, "forward_sample");
  require_same_shape(x0, pi, "forward_sample");
  require_same_shape(x0, eps, "forward_sample");
  if (i == 0) return x0;
  if (i == coeffs.steps()) return mu;
  const double theta = coeffs.Theta[i];
  const double sigma = coeffs.Sigma[i];
  return map_elements(
      "forward_sample",
      [theta, sigma](double a, double m, double p, double e) { return m + (a - m) * theta + p * sigma * e; },
      x0, mu, pi, eps);
}

// Pixel-independent residual-to-noise ratio; diverges at i = 0.
inline double rtn_ratio(const BridgeCoefficients& coeffs, std::size_t i) {
  coeffs.check_index(i, "rtn_ratio");
  if (i == 0) throw SingularityError("rtn_ratio: diverges at t = 0");
  return coeffs.R[i];
}

// Per-pixel ratio (x0 - mu)^2 / (2 pi^2 lambda) * R_i. Pixels with pi = 0 and
// a nonzero residual get +inf; pixels with both zero get 0.
inline TensorGrid rtn_ratio_pixel(const TensorGrid& x0, const TensorGrid& mu, const TensorGrid& pi,
                                  double lambda, const BridgeCoefficients& coeffs, std::size_t i) {
  const double r = rtn_ratio(coeffs, i);
  return map_elements(
      "rtn_ratio_pixel",
      [r, lambda](double a, double m, double p) {
        const double res2 = (a - m) * (a - m);
        if (res2 == 0.0) return 0.0;
        if (p == 0.0) return std::numeric_limits<double>::infinity();
        return res2 / (2.0 * p * p * lambda) * r;
      },
      x0, mu, pi);
}

// Scalar drift coefficient theta_t coth(cum(t, T)).
inline double bridge_drift_coefficient(const ScheduleSpec& spec, double t) {
  if (!(t >= 0.0)) throw DomainError("bridge_drift: t < 0");
  if (t >= spec.horizon) throw SingularityError("bridge_drift: coth diverges at t = T");
  const double tail = cumulative_theta(spec, t, spec.horizon);
  if (tail == 0.0) throw SingularityError("bridge_drift: zero remaining integral");
  return theta_at(spec, t) * coth(tail);
}

inline TensorGrid bridge_drift(const ScheduleSpec& spec, double t, const TensorGrid& x, const TensorGrid& mu) {
  const double k = bridge_drift_coefficient(spec, t);
  return map_elements("bridge_drift", [k](double xv, double m) { return k * (m - xv); }, x, mu);
}

inline TensorGrid bridge_diffusion(const ScheduleSpec& spec, double t, const TensorGrid& pi) {
  const double g = std::sqrt(2.0 * spec.lambda * theta_at(spec, t));
  return map_elements("bridge_diffusion", [g](double p) { return std::abs(p) * g; }, pi);
}

struct Transition {
  TensorGrid mean;
  TensorGrid var;
};

// Transition law of the unconditioned OU process dx = theta (mu - x) dt + pi sigma dw.
inline Transition ou_transition(const ScheduleSpec& spec, const TensorGrid& x_s, const TensorGrid& mu,
                                const TensorGrid& pi, double s, double t) {
  if (s > t) throw DomainError("ou_transition: s > t");
  const double a = cumulative_theta(spec, s, t);
  const double decay = std::exp(-a);
  const double spread = -std::expm1(-2.0 * a);
  const double lambda = spec.lambda;
  return {map_elements("ou_transition", [decay](double x, double m) { return m + (x - m) * decay; }, x_s, mu),
          map_elements("ou_transition", [lambda, spread](double p) { return lambda * p * p * spread; }, pi)};
}

// grad_x log p(x_T = mu | x_t) of the OU kernel: the Doob h-term.
inline TensorGrid doob_h(const ScheduleSpec& spec, const TensorGrid& x_t, const TensorGrid& mu,
                         const TensorGrid& pi, double t) {
  if (!(t >= 0.0)) throw DomainError("doob_h: t < 0");
  if (t >= spec.horizon) throw SingularityError("doob_h: singular at t = T");
  const double a = cumulative_theta(spec, t, spec.horizon);
  if (a == 0.0) throw SingularityError("doob_h: zero remaining integral");
  // e^{-2a} / (1 - e^{-2a}) = 1 / expm1(2a)
  const double weight = 1.0 / std::expm1(2.0 * a);
  const double lambda = spec.lambda;
  return map_elements(
      "doob_h",
      [weight, lambda](double x, double m, double p) {
        if (p == 0.0) throw std::domain_error("doob_h: pi = 0 (division by zero)");
        return (m - x) * weight / (lambda * p * p);
      },
      x_t, mu, pi);
}

// Integrating factor Psi_i = sinh(cum(0, T)) / sinh(cum(t_i, T)).
inline double psi_factor(const ScheduleTable& table, std::size_t i) {
  if (i > table.steps()) throw DomainError("psi_factor: index out of range");
  if (i == table.steps()) throw SingularityError("psi_factor: diverges at t = T");
  if (i == 0) return 1.0;
  return std::exp(log_sinh(table.total) - log_sinh(table.cum_to_end(i)));
}

// Table 1 configurations. The limit variants use pi = 1 and expect the caller
// to set a small theta (and lambda) as described by BridgeVariant::limit_spec.
enum class VariantKind { rdbm, global_noise_pi1, deterministic_pi0, brownian, ve_bridge, vp_bridge };

inline std::string_view to_string(VariantKind k) {
  switch (k) {
    case VariantKind::rdbm: return "rdbm";
    case VariantKind::global_noise_pi1: return "global_noise_pi1";
    case VariantKind::deterministic_pi0: return "deterministic_pi0";
    case VariantKind::brownian: return "brownian";
    case VariantKind::ve_bridge: return "ve_bridge";
    case VariantKind::vp_bridge: return "vp_bridge";
  }
  return "?";
}

inline VariantKind parse_variant(std::string_view name) {
  if (name == "rdbm") return VariantKind::rdbm;
  if (name == "global_noise_pi1" || name == "ou_bridge" || name == "pi1") return VariantKind::global_noise_pi1;
  if (name == "deterministic_pi0" || name == "flow" || name == "flow_matching" || name == "pi0") {
    return VariantKind::deterministic_pi0;
  }
  if (name == "brownian") return VariantKind::brownian;
  if (name == "ve_bridge" || name == "ve") return VariantKind::ve_bridge;
  if (name == "vp_bridge" || name == "vp") return VariantKind::vp_bridge;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

struct BridgeVariant {
  VariantKind kind = VariantKind::rdbm;
  double small_theta = 1e-5;
  bool absolute_residual = false;

  // Schedule realising the theta -> 0 limits on top of `base`.
  //   brownian:  constant theta, 2 lambda theta = 1
  //   ve_bridge: constant theta, lambda kept (sigma^2 = 2 lambda theta)
  //   vp_bridge: constant theta, lambda = 1/2 (theta = sigma^2 / 2)
  //   deterministic_pi0: constant theta (the Brownian-bridge mean path)
  ScheduleSpec limit_spec(const ScheduleSpec& base) const {
    ScheduleSpec s = ScheduleSpec::constant_rate(small_theta, base.horizon, base.steps, base.lambda);
    switch (kind) {
      case VariantKind::brownian: s.lambda = 1.0 / (2.0 * small_theta); break;
      case VariantKind::vp_bridge: s.lambda = 0.5; break;
      case VariantKind::ve_bridge:
      case VariantKind::deterministic_pi0: break;
      default: return base;
    }
    return s;
  }
};

inline TensorGrid variant_pi(const BridgeVariant& variant, const TensorGrid& x0, const TensorGrid& mu) {
  require_same_shape(x0, mu, "variant_pi");
  switch (variant.kind) {
    case VariantKind::rdbm: return residual(x0, mu, variant.absolute_residual);
    case VariantKind::deterministic_pi0: return TensorGrid(x0.shape(), 0.0);
    default: return TensorGrid(x0.shape(), 1.0);
  }
}

// CSV with header i,t,theta_bar_0t,Theta,Sigma,R and 17 significant digits.
inline void write_coefficients_csv(std::ostream& os, const BridgeCoefficients& c) {
  const auto old_precision = os.precision(17);
  os << "i,t,theta_bar_0t,Theta,Sigma,R\n";
  for (std::size_t i = 0; i <= c.steps(); ++i) {
    os << i << ',' << c.t[i] << ',' << c.cum0[i] << ',' << c.Theta[i] << ',' << c.Sigma[i] << ',';
    if (std::isinf(c.R[i])) {
      os << "inf";
    } else {
      os << c.R[i];
    }
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace rdbm
