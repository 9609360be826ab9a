#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

#include "rdbm/bridge.hpp"
#include "rdbm/errors.hpp"
#include "rdbm/random.hpp"
#include "rdbm/sde_sim.hpp"
#include "rdbm/tensor.hpp"

namespace rdbm {

// Coefficients of the reverse update from step i to i - 1. At i = N the
// virtual point T - T/(2N) stands in for (Theta_N, Sigma_N) = (0, 0).
struct StepCoefficients {
  double theta_cur;
  double sigma_cur;
  double theta_prev;
  double sigma_prev;
};

inline StepCoefficients step_coefficients(const BridgeCoefficients& c, std::size_t i) {
  c.check_index(i, "reverse step");
  if (i == 0) throw DomainError("reverse step: requires i >= 1");
  const bool terminal = i == c.steps();
  return {terminal ? c.terminal_Theta : c.Theta[i], terminal ? c.terminal_Sigma : c.Sigma[i], c.Theta[i - 1],
          c.Sigma[i - 1]};
}

struct ReverseStepCoeffs {
  double kappa = 0.0;        // Sigma_{t-1} / Sigma_t
  double gamma = 0.0;        // Theta_{t-1} - Theta_t kappa
  double eta = 0.0;          // 1 - Theta_{t-1} - (1 - Theta_t) kappa
  double noise_coeff = 0.0;  // (Theta_{t-1} / Theta_t) Sigma_t - Sigma_{t-1}
};

inline ReverseStepCoeffs reverse_coeffs(const BridgeCoefficients& coeffs, std::size_t i) {
  const auto s = step_coefficients(coeffs, i);
  if (!(s.sigma_cur > 0.0)) throw DegenerateScheduleError("reverse_coeffs: Sigma_i = 0 at interior step");
  if (!(s.theta_cur > 0.0)) throw DegenerateScheduleError("reverse_coeffs: Theta_i = 0 at interior step");
  ReverseStepCoeffs r;
  r.kappa = s.sigma_prev / s.sigma_cur;
  r.gamma = s.theta_prev - s.theta_cur * r.kappa;
  r.eta = 1.0 - s.theta_prev - (1.0 - s.theta_cur) * r.kappa;
  r.noise_coeff = s.theta_prev / s.theta_cur * s.sigma_cur - s.sigma_prev;
  return r;
}

// Deterministic reverse update
//   x_{i-1} = mu + (Theta_{i-1}/Theta_i)(x_i - mu) - ((Theta_{i-1}/Theta_i) Sigma_i - Sigma_{i-1}) pi_eps
inline TensorGrid ddim_step(const TensorGrid& x_t, const TensorGrid& mu, const TensorGrid& pi_eps,
                            const BridgeCoefficients& coeffs, std::size_t i) {
  const auto s = step_coefficients(coeffs, i);
  if (!(s.theta_cur > 0.0)) throw DegenerateScheduleError("ddim_step: Theta_i = 0");
  const double ratio = s.theta_prev / s.theta_cur;
  const double noise = ratio * s.sigma_cur - s.sigma_prev;
  return map_elements(
      "ddim_step", [ratio, noise](double x, double m, double pe) { return m + ratio * (x - m) - noise * pe; }, x_t,
      mu, pi_eps);
}

// The residual form mu + kappa (x_i - mu) + (Theta_{i-1} - Theta_i kappa) pi,
// which needs the residual itself instead of pi * eps.
inline TensorGrid ddim_step_residual_form(const TensorGrid& x_t, const TensorGrid& mu, const TensorGrid& pi,
                                          const BridgeCoefficients& coeffs, std::size_t i) {
  const auto r = reverse_coeffs(coeffs, i);
  return map_elements(
      "ddim_step_residual_form", [&r](double x, double m, double p) { return m + r.kappa * (x - m) + r.gamma * p; },
      x_t, mu, pi);
}

// x0 = mu + (x_i - mu - Sigma_i pi_eps) / Theta_i.
inline TensorGrid estimate_x0(const TensorGrid& x_t, const TensorGrid& mu, const TensorGrid& pi_eps,
                              const BridgeCoefficients& coeffs, std::size_t i) {
  const auto s = step_coefficients(coeffs, i);
  return map_elements(
      "estimate_x0", [&s](double x, double m, double pe) { return m + (x - m - s.sigma_cur * pe) / s.theta_cur; },
      x_t, mu, pi_eps);
}

// Mean and variance of the reverse kernel from the completed-square form
//   precision = 1/(r^2 Sigma_i^2 - Sigma_{i-1}^2) + 1/Sigma_{i-1}^2,  r = Theta_{i-1}/Theta_i
// At i = N (x_N = mu carries no information) this is the forward marginal at N - 1.
inline GaussianMoments reverse_kernel_moments(const BridgeCoefficients& coeffs, std::size_t i, double x0, double mu,
                                              double pi, double x_t) {
  coeffs.check_index(i, "reverse_kernel_moments");
  if (i == 0) throw DomainError("reverse_kernel_moments: requires i >= 1");
  const double theta_prev = coeffs.Theta[i - 1];
  const double s_prev2 = coeffs.Sigma[i - 1] * coeffs.Sigma[i - 1];
  const double data_mean = mu + (x0 - mu) * theta_prev;
  const double p2 = pi * pi;
  if (i == coeffs.steps() || s_prev2 == 0.0 || p2 == 0.0) return {data_mean, p2 * s_prev2};
  const double r = theta_prev / coeffs.Theta[i];
  const double kernel = r * r * coeffs.Sigma[i] * coeffs.Sigma[i] - s_prev2;
  if (kernel < 0.0) throw ConsistencyError("reverse_kernel_moments: negative kernel variance");
  if (kernel == 0.0) return {mu + r * (x_t - mu), 0.0};
  const double var_unit = s_prev2 * kernel / (kernel + s_prev2);
  const double mean = var_unit * ((mu + r * (x_t - mu)) / kernel + data_mean / s_prev2);
  return {mean, p2 * var_unit};
}

// Stochastic reverse step drawing x_{i-1} from the reverse kernel. With
// deterministic set, the kernel mean is returned.
inline TensorGrid posterior_step(const TensorGrid& x_t, const TensorGrid& mu, const TensorGrid& x0_est,
                                 const TensorGrid& pi, const BridgeCoefficients& coeffs, std::size_t i,
                                 RandomStream& rng, bool deterministic = false) {
  require_same_shape(x_t, mu, "posterior_step");
  require_same_shape(x_t, x0_est, "posterior_step");
  require_same_shape(x_t, pi, "posterior_step");
  TensorGrid out(x_t.shape());
  for (std::size_t k = 0; k < x_t.size(); ++k) {
    const auto m = reverse_kernel_moments(coeffs, i, x0_est[k], mu[k], pi[k], x_t[k]);
    const double z = rng.normal();
    out[k] = deterministic || m.var == 0.0 ? m.mean : m.mean + std::sqrt(m.var) * z;
  }
  return out;
}

enum class SamplerMode { ddim, posterior };

inline SamplerMode parse_sampler_mode(std::string_view s) {
  if (s == "ddim") return SamplerMode::ddim;
  if (s == "posterior") return SamplerMode::posterior;
  throw std::invalid_argument("unknown sampler mode '" + std::string(s) + "'");
}

// Maps (x_i, i, mu) to an estimate of pi * eps.
using Predictor = std::function<TensorGrid(const TensorGrid&, std::size_t, const TensorGrid&)>;

struct SampleOptions {
  SamplerMode mode = SamplerMode::ddim;
  BridgeVariant variant{};
  std::uint64_t seed = 0;
  bool deterministic_posterior = false;
};

// Reverse loop: x_N = mu, then steps i = N .. 1.
inline TensorGrid sample_loop(const Predictor& predictor, const TensorGrid& mu, const BridgeCoefficients& coeffs,
                              std::size_t steps, const SampleOptions& opts = {}) {
  if (steps != coeffs.steps()) {
    throw std::invalid_argument("sample_loop: steps (" + std::to_string(steps) +
                                ") must equal the coefficient grid size (" + std::to_string(coeffs.steps()) + ")");
  }
  RandomStream rng(opts.seed, stream_id("sample_loop"));
  TensorGrid x = mu;
  for (std::size_t i = steps; i >= 1; --i) {
    TensorGrid pi_eps = predictor(x, i, mu);
    if (!pi_eps.same_shape(mu)) {
      throw ShapeError("sample_loop: predictor output " + shape_string(pi_eps) + " does not match " +
                       shape_string(mu));
    }
    if (opts.mode == SamplerMode::ddim) {
      x = ddim_step(x, mu, pi_eps, coeffs, i);
    } else {
      const TensorGrid x0_est = estimate_x0(x, mu, pi_eps, coeffs, i);
      const TensorGrid pi = variant_pi(opts.variant, x0_est, mu);
      x = posterior_step(x, mu, x0_est, pi, coeffs, i, rng, opts.deterministic_posterior);
    }
  }
  return x;
}

// Predictor that knows x0 and returns the pi * eps consistent with the current
// state: (x_i - mu - (x0 - mu) Theta_i) / Sigma_i, with the virtual terminal
// coefficients at i = N.
inline Predictor oracle_predictor(TensorGrid x0, const BridgeCoefficients& coeffs) {
  return [x0 = std::move(x0), &coeffs](const TensorGrid& x_t, std::size_t i, const TensorGrid& mu) {
    const auto s = step_coefficients(coeffs, i);
    return map_elements(
        "oracle_predictor",
        [&s](double x, double m, double a) {
          const double innovation = x - m - (a - m) * s.theta_cur;
          return innovation == 0.0 ? 0.0 : innovation / s.sigma_cur;
        },
        x_t, mu, x0);
  };
}

}  // namespace rdbm
