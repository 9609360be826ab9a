#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "rdbm/bridge.hpp"
#include "rdbm/errors.hpp"
#include "rdbm/random.hpp"
#include "rdbm/schedules.hpp"

namespace rdbm {

// Worker count: hardware concurrency, capped by RDBM_THREADS when set.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RDBM_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return n;
}

// Runs body(k) for k in [0, count) on up to `workers` threads. Work items must
// write to disjoint outputs; the caller reduces them in index order.
template <typename Body>
void parallel_for(std::size_t count, unsigned workers, Body&& body) {
  workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), count));
  if (workers <= 1) {
    for (std::size_t k = 0; k < count; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) body(k);
    });
  }
  for (auto& th : pool) th.join();
}

struct SimConfig {
  std::size_t trajectories = 200'000;
  std::size_t substeps_per_cell = 64;
  double endpoint_clip = 0.01;  // fraction of T
  std::uint64_t seed = 42;
  unsigned workers = 0;  // 0 = worker_count()
  // Extrapolate 2 E[EM(h/2)] - E[EM(h)] from coupled paths (h = one substep),
  // cancelling the O(h) weak error of the plain scheme.
  bool richardson = true;

  void validate() const {
    if (trajectories < 2) throw std::invalid_argument("SimConfig: need at least 2 trajectories");
    if (substeps_per_cell < 1) throw std::invalid_argument("SimConfig: substeps_per_cell must be >= 1");
    if (!(endpoint_clip > 0.0 && endpoint_clip < 1.0)) {
      throw std::invalid_argument("SimConfig: endpoint clip must be in (0, 1)");
    }
  }
};

struct MomentEstimate {
  std::size_t index = 0;
  double t = 0.0;
  double mean = 0.0;
  double mean_se = 0.0;
  double var = 0.0;
  double var_se = 0.0;
};

namespace detail {

// Per-checkpoint sums over one block of trajectories. For a plain run `a` is
// x - shift; for an extrapolated run a = fine - fine_shift, b = coarse - coarse_shift.
struct PowerSums {
  double n = 0;
  double a1 = 0, a2 = 0, a3 = 0, a4 = 0;
  double b1 = 0, b2 = 0;
  double y1 = 0, y2 = 0;  // y = 2a - b
  double p1 = 0, p2 = 0;  // p = 2a^2 - b^2

  void add(double a) {
    const double a2v = a * a;
    n += 1;
    a1 += a;
    a2 += a2v;
    a3 += a2v * a;
    a4 += a2v * a2v;
  }

  void add_pair(double a, double b) {
    const double y = 2.0 * a - b;
    const double p = 2.0 * a * a - b * b;
    n += 1;
    a1 += a;
    a2 += a * a;
    b1 += b;
    b2 += b * b;
    y1 += y;
    y2 += y * y;
    p1 += p;
    p2 += p * p;
  }

  PowerSums& operator+=(const PowerSums& o) {
    n += o.n;
    a1 += o.a1;
    a2 += o.a2;
    a3 += o.a3;
    a4 += o.a4;
    b1 += o.b1;
    b2 += o.b2;
    y1 += o.y1;
    y2 += o.y2;
    p1 += o.p1;
    p2 += o.p2;
    return *this;
  }
};

// Pairwise reduction in a fixed tree shape, independent of thread count.
inline PowerSums tree_reduce(const std::vector<PowerSums>& parts, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return parts[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  PowerSums left = tree_reduce(parts, lo, mid);
  left += tree_reduce(parts, mid, hi);
  return left;
}

inline MomentEstimate finish_moments(const PowerSums& p, double shift) {
  MomentEstimate m;
  const double n = p.n;
  const double d = p.a1 / n;
  const double e2 = p.a2 / n;
  const double e3 = p.a3 / n;
  const double e4 = p.a4 / n;
  const double m2 = std::max(0.0, e2 - d * d);
  const double m4 = std::max(0.0, e4 - 4.0 * d * e3 + 6.0 * d * d * e2 - 3.0 * d * d * d * d);
  m.mean = shift + d;
  m.var = m2 * n / (n - 1.0);
  m.mean_se = std::sqrt(m.var / n);
  m.var_se = std::sqrt(std::max(0.0, m4 - m2 * m2) / n);
  return m;
}

// mean = 2 mean_fine - mean_coarse, var = 2 var_fine - var_coarse. Standard
// errors come from the per-trajectory combinations y and p (the shifts are the
// exact means of the linear scheme, so centring corrections are O(1/n)).
inline MomentEstimate finish_extrapolated(const PowerSums& p, double fine_shift, double coarse_shift) {
  MomentEstimate m;
  const double n = p.n;
  const double bessel = n / (n - 1.0);
  const double var_f = std::max(0.0, p.a2 / n - (p.a1 / n) * (p.a1 / n)) * bessel;
  const double var_c = std::max(0.0, p.b2 / n - (p.b1 / n) * (p.b1 / n)) * bessel;
  const double y_mean = p.y1 / n;
  m.mean = 2.0 * fine_shift - coarse_shift + y_mean;
  m.mean_se = std::sqrt(std::max(0.0, p.y2 / n - y_mean * y_mean) * bessel / n);
  m.var = 2.0 * var_f - var_c;
  const double p_mean = p.p1 / n;
  m.var_se = std::sqrt(std::max(0.0, p.p2 / n - p_mean * p_mean) / n);
  return m;
}

// Per-substep drift factor theta_t coth(cum(t, T)) h and noise scale
// |pi| sqrt(2 lambda theta_t) sqrt(h), evaluated at the left end of each substep.
struct EulerGrid {
  std::vector<double> drift;
  std::vector<double> noise;
  std::vector<double> shift;  // noise-free path at the checkpoints
};

inline EulerGrid euler_grid(const ScheduleSpec& spec, const ScheduleTable& table, double x0, double mu, double pi,
                            std::size_t sub, std::size_t cells) {
  EulerGrid g;
  const std::size_t total = cells * sub;
  const double h = spec.horizon / static_cast<double>(spec.steps * sub);
  g.drift.resize(total);
  g.noise.resize(total);
  for (std::size_t k = 0; k < total; ++k) {
    const double t = h * static_cast<double>(k);
    const double rate = theta_unchecked(spec, t);
    g.drift[k] = rate * coth(table.cum_between(t, spec.horizon)) * h;
    g.noise[k] = std::abs(pi) * std::sqrt(2.0 * spec.lambda * rate) * std::sqrt(h);
  }
  g.shift.assign(cells + 1, x0);
  double x = x0;
  for (std::size_t k = 0; k < total; ++k) {
    x += g.drift[k] * (mu - x);
    if ((k + 1) % sub == 0) g.shift[(k + 1) / sub] = x;
  }
  return g;
}

}  // namespace detail

// Euler-Maruyama on dx = theta_t coth(cum(t,T)) (mu - x) dt + sqrt(2 pi^2 lambda theta_t) dw,
// stopped at the last grid time <= T - delta. Returns moments at every grid
// time up to that point (index 0 included).
inline std::vector<MomentEstimate> euler_maruyama_forward(const ScheduleSpec& spec, double x0, double mu,
                                                          double pi, const SimConfig& cfg) {
  cfg.validate();
  const ScheduleTable table = build_table(spec);
  const std::size_t n = spec.steps;
  const double stop_time = spec.horizon * (1.0 - cfg.endpoint_clip);
  std::size_t last_index = 0;
  while (last_index + 1 <= n && table.t_grid[last_index + 1] <= stop_time + 1e-12 * spec.horizon) ++last_index;
  if (last_index == n) last_index = n - 1;

  const std::size_t sub = cfg.substeps_per_cell;
  const detail::EulerGrid coarse = detail::euler_grid(spec, table, x0, mu, pi, sub, last_index);
  detail::EulerGrid fine;
  if (cfg.richardson) fine = detail::euler_grid(spec, table, x0, mu, pi, 2 * sub, last_index);
  const std::size_t total_steps = last_index * sub;

  constexpr std::size_t kBlock = 1024;
  const std::size_t blocks = (cfg.trajectories + kBlock - 1) / kBlock;
  std::vector<std::vector<detail::PowerSums>> partial(blocks, std::vector<detail::PowerSums>(last_index + 1));
  const bool stochastic = pi != 0.0;
  parallel_for(blocks, cfg.workers ? cfg.workers : worker_count(), [&](std::size_t b) {
    auto& sums = partial[b];
    const std::size_t first = b * kBlock;
    const std::size_t end = std::min(cfg.trajectories, first + kBlock);
    for (std::size_t traj = first; traj < end; ++traj) {
      RandomStream rng(cfg.seed, traj);
      double x = x0;
      if (!cfg.richardson) {
        sums[0].add(0.0);
        for (std::size_t k = 0; k < total_steps; ++k) {
          x += coarse.drift[k] * (mu - x);
          if (stochastic) x += coarse.noise[k] * rng.normal();
          if ((k + 1) % sub == 0) {
            const std::size_t i = (k + 1) / sub;
            sums[i].add(x - coarse.shift[i]);
          }
        }
        continue;
      }
      // The coarse step reuses the sum of the two fine Brownian increments.
      double xf = x0;
      sums[0].add_pair(0.0, 0.0);
      for (std::size_t k = 0; k < total_steps; ++k) {
        double z1 = 0.0, z2 = 0.0;
        if (stochastic) {
          z1 = rng.normal();
          z2 = rng.normal();
        }
        xf += fine.drift[2 * k] * (mu - xf) + fine.noise[2 * k] * z1;
        xf += fine.drift[2 * k + 1] * (mu - xf) + fine.noise[2 * k + 1] * z2;
        x += coarse.drift[k] * (mu - x) + coarse.noise[k] * (z1 + z2) * std::numbers::sqrt2 * 0.5;
        if ((k + 1) % sub == 0) {
          const std::size_t i = (k + 1) / sub;
          sums[i].add_pair(xf - fine.shift[i], x - coarse.shift[i]);
        }
      }
    }
  });

  std::vector<MomentEstimate> out;
  out.reserve(last_index + 1);
  for (std::size_t i = 0; i <= last_index; ++i) {
    std::vector<detail::PowerSums> column(blocks);
    for (std::size_t b = 0; b < blocks; ++b) column[b] = partial[b][i];
    const detail::PowerSums total = detail::tree_reduce(column, 0, blocks);
    MomentEstimate m = cfg.richardson ? detail::finish_extrapolated(total, fine.shift[i], coarse.shift[i])
                                      : detail::finish_moments(total, coarse.shift[i]);
    m.index = i;
    m.t = table.t_grid[i];
    out.push_back(m);
  }
  return out;
}

// One draw from the exact marginal N(mu + (x0 - mu) Theta_i, pi^2 Sigma_i^2).
inline double exact_transition_sample(const BridgeCoefficients& coeffs, double x0, double mu, double pi,
                                      std::size_t i, RandomStream& rng) {
  coeffs.check_index(i, "exact_transition_sample");
  if (i == coeffs.steps()) return mu;
  if (i == 0) return x0;
  return mu + (x0 - mu) * coeffs.Theta[i] + pi * coeffs.Sigma[i] * rng.normal();
}

struct GaussianMoments {
  double mean = 0.0;
  double var = 0.0;
};

// Law of x_{i-1} given (x0, mu, x_i) by bivariate Gaussian conditioning:
//   x_{i-1}       ~ N(mu + (x0 - mu) Theta_{i-1}, pi^2 Sigma_{i-1}^2)
//   x_i | x_{i-1} ~ N(mu + a (x_{i-1} - mu), pi^2 (Sigma_i^2 - a^2 Sigma_{i-1}^2)),  a = Theta_i / Theta_{i-1}
inline GaussianMoments posterior_oracle(const BridgeCoefficients& coeffs, std::size_t i, double x0, double mu,
                                        double pi, double x_t) {
  coeffs.check_index(i, "posterior_oracle");
  if (i == 0) throw DomainError("posterior_oracle: requires i >= 1");
  const double theta_prev = coeffs.Theta[i - 1];
  if (!(theta_prev > 0.0)) throw DomainError("posterior_oracle: Theta_{i-1} must be > 0");
  const double a = coeffs.Theta[i] / theta_prev;
  const double s_prev2 = coeffs.Sigma[i - 1] * coeffs.Sigma[i - 1];
  const double s_cur2 = coeffs.Sigma[i] * coeffs.Sigma[i];
  double kernel = s_cur2 - a * a * s_prev2;
  if (kernel < 0.0) {
    if (kernel < -1e-12 * std::max(s_cur2, 1e-300)) {
      throw ConsistencyError("posterior_oracle: negative forward-kernel variance at i = " + std::to_string(i));
    }
    kernel = 0.0;
  }
  const double p2 = pi * pi;
  const double prior_mean = mu + (x0 - mu) * theta_prev;
  const double prior_var = p2 * s_prev2;
  const double marg_mean = mu + a * (prior_mean - mu);
  const double marg_var = a * a * prior_var + p2 * kernel;
  if (marg_var == 0.0) return {prior_mean, prior_var};
  const double gain = a * prior_var / marg_var;
  return {prior_mean + gain * (x_t - marg_mean), prior_var * (p2 * kernel) / marg_var};
}

}  // namespace rdbm
