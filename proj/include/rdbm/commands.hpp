#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdbm/bridge.hpp"
#include "rdbm/config.hpp"
#include "rdbm/metrics_io.hpp"
#include "rdbm/samplers.hpp"
#include "rdbm/schedules.hpp"
#include "rdbm/sde_sim.hpp"
#include "rdbm/trainer.hpp"

namespace rdbm::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

inline RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c = g.config ? load_run_config(*g.config) : RunConfig{};
  if (g.seed) c.seed = g.seed;
  return c;
}

inline std::filesystem::path output_path(const GlobalOptions& g, const char* fallback) {
  return g.out ? *g.out : std::filesystem::path(fallback);
}

// "dir/name.ext" + "_x.csv" -> "dir/name_x.csv"
inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

inline void print_resolved(std::ostream& log, const char* command, const nlohmann::json& resolved) {
  log << "# rdbm " << command << " resolved config\n" << resolved.dump(2) << "\n";
}

template <typename Fn>
void write_text_file(const std::filesystem::path& path, Fn&& fn) {
  io_detail::with_output_file(path, std::forward<Fn>(fn));
}

// ---------------------------------------------------------------------------
// tabulate

inline int run_tabulate(const GlobalOptions& g, std::ostream& log) {
  const RunConfig cfg = resolve_config(g);
  const auto csv_path = output_path(g, "coefficients.csv");
  const auto svg_path = std::filesystem::path(csv_path).replace_extension(".svg");
  print_resolved(log, "tabulate",
                 {{"schedule", cfg.schedule}, {"out", csv_path.string()}, {"svg", svg_path.string()}});

  const BridgeCoefficients c = compute_coefficients(cfg.schedule);
  write_text_file(csv_path, [&](std::ostream& os) { write_coefficients_csv(os, c); });

  std::vector<PlotSeries> series{{"Theta", c.t, c.Theta}, {"Sigma", c.t, c.Sigma}, {"log10 R", c.t, {}}};
  for (double r : c.R) series[2].y.push_back(r > 0.0 ? std::log10(r) : -std::numeric_limits<double>::infinity());
  PlotOptions opt;
  opt.title = "bridge coefficients (" + std::string(to_string(cfg.schedule.family)) + ")";
  opt.y_label = "value";
  write_text_file(svg_path, [&](std::ostream& os) { write_svg_plot(os, series, opt); });
  log << "wrote " << c.steps() + 1 << " rows to " << csv_path.string() << " and plot to " << svg_path.string()
      << "\n";
  return kExitPass;
}

// ---------------------------------------------------------------------------
// verify

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct MomentRow {
  double t = 0.0;
  double analytic_mean = 0.0;
  double mc_mean = 0.0;
  double mean_se = 0.0;
  double analytic_var = 0.0;
  double mc_var = 0.0;
  double var_se = 0.0;
  bool mean_ok = false;
  bool var_ok = false;
};

// Mean within 4 standard errors; variance within max(2% relative, 4 SE).
// With pi = 0 the standard errors vanish and the mean is held to the same 2%
// relative band (measured on the residual part) to absorb Euler bias.
inline std::vector<MomentRow> compare_moments(const std::vector<MomentEstimate>& mc, const BridgeCoefficients& c,
                                              double x0, double mu, double pi, double sigma_scale = 1.0) {
  std::vector<MomentRow> rows;
  for (const auto& m : mc) {
    if (m.index == 0) continue;
    MomentRow r;
    r.t = m.t;
    r.analytic_mean = mu + (x0 - mu) * c.Theta[m.index];
    const double s = sigma_scale * c.Sigma[m.index];
    r.analytic_var = pi * pi * s * s;
    r.mc_mean = m.mean;
    r.mean_se = m.mean_se;
    r.mc_var = m.var;
    r.var_se = m.var_se;
    const double mean_tol = m.mean_se > 0.0 ? 4.0 * m.mean_se : 0.02 * std::abs(r.analytic_mean - mu);
    r.mean_ok = std::abs(r.mc_mean - r.analytic_mean) <= mean_tol;
    r.var_ok = std::abs(r.mc_var - r.analytic_var) <= std::max(0.02 * r.analytic_var, 4.0 * r.var_se);
    rows.push_back(r);
  }
  return rows;
}

inline double oracle_recovery_error(const BridgeCoefficients& c, std::uint64_t seed) {
  RandomStream rng(seed, stream_id("verify_oracle"));
  TensorGrid x0({8, 8}), mu({8, 8});
  for (std::size_t k = 0; k < x0.size(); ++k) {
    x0[k] = rng.uniform();
    mu[k] = k % 3 == 0 ? x0[k] : rng.uniform();
  }
  const TensorGrid out = sample_loop(oracle_predictor(x0, c), mu, c, c.steps());
  double err = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < x0.size(); ++k) {
    err = std::max(err, std::abs(out[k] - x0[k]));
    scale = std::max(scale, std::abs(x0[k]));
  }
  return err / scale;
}

inline double drift_identity_error(const ScheduleSpec& spec, double clip, std::uint64_t seed, int points = 50) {
  RandomStream rng(seed, stream_id("verify_drift"));
  double worst = 0.0;
  const TensorGrid x({1}, 0.0), mu({1}, 1.0), pi({1}, 1.0);
  for (int k = 0; k < points; ++k) {
    const double t = spec.horizon * (1.0 - clip) * rng.uniform();
    const double rate = theta_at(spec, t);
    const double g2 = 2.0 * spec.lambda * rate;
    const double lhs = rate + g2 * doob_h(spec, x, mu, pi, t)[0];
    const double rhs = bridge_drift_coefficient(spec, t);
    worst = std::max(worst, std::abs(lhs - rhs) / std::abs(rhs));
  }
  return worst;
}

// Adaptive Simpson on a smooth integrand.
template <typename F>
double adaptive_simpson(F&& f, double a, double b, double tol, int depth = 40) {
  struct Rec {
    F& f;
    double run(double a, double b, double fa, double fm, double fb, double whole, double tol, int depth) {
      const double m = 0.5 * (a + b);
      const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
      const double flm = f(lm), frm = f(rm);
      const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
      const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
      if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) return left + right + (left + right - whole) / 15.0;
      return run(a, m, fa, flm, fm, left, tol / 2, depth - 1) + run(m, b, fm, frm, fb, right, tol / 2, depth - 1);
    }
  };
  Rec r{f};
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return r.run(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, depth);
}

// max over grid points i < N of |quadrature of theta coth(cum(s,T)) - log Psi_i|.
inline double psi_quadrature_error(const ScheduleSpec& spec) {
  const ScheduleTable table = build_table(spec);
  auto integrand = [&](double s) { return detail::theta_unchecked(spec, s) * coth(table.cum_between(s, spec.horizon)); };
  double worst = 0.0, acc = 0.0;
  for (std::size_t i = 1; i < table.steps(); ++i) {
    acc += adaptive_simpson(integrand, table.t_grid[i - 1], table.t_grid[i], 1e-13);
    const double closed = log_sinh(table.total) - log_sinh(table.cum_to_end(i));
    worst = std::max({worst, std::abs(acc - closed), std::abs(std::log(psi_factor(table, i)) - closed)});
  }
  return worst;
}

struct PosteriorAgreement {
  double moment_error = 0.0;      // relative, mean and variance
  double constraint_error = 0.0;  // absolute, kappa/gamma/eta identities
};

inline PosteriorAgreement posterior_agreement(const BridgeCoefficients& c, std::uint64_t seed, int instances = 100) {
  RandomStream rng(seed, stream_id("verify_posterior"));
  PosteriorAgreement out;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
  for (int k = 0; k < instances; ++k) {
    const std::size_t i = 1 + rng.uniform_int(0, c.steps() - 2);
    const double x0 = rng.uniform(), mu = rng.uniform();
    const double pi = rng.uniform() < 0.5 ? x0 - mu : 1.0;
    const double x_t = mu + (x0 - mu) * c.Theta[i] + pi * c.Sigma[i] * rng.normal();
    const auto a = reverse_kernel_moments(c, i, x0, mu, pi, x_t);
    const auto b = posterior_oracle(c, i, x0, mu, pi, x_t);
    out.moment_error = std::max({out.moment_error, rel(a.mean, b.mean), rel(a.var, b.var)});
    const auto r = reverse_coeffs(c, i);
    out.constraint_error = std::max({out.constraint_error, std::abs(r.kappa * c.Theta[i] + r.gamma - c.Theta[i - 1]),
                                     std::abs(r.kappa * (1.0 - c.Theta[i]) + r.eta - (1.0 - c.Theta[i - 1])),
                                     std::abs(r.kappa * c.Sigma[i] - c.Sigma[i - 1])});
  }
  return out;
}

struct LimitDeviation {
  double theta_dev = 0.0;   // max |Theta - target|
  double sigma2_dev = 0.0;  // max |pi^2 Sigma^2 - target|
  double drift_dev = 0.0;   // max relative drift-coefficient deviation over t_i < T
  std::optional<double> stochastic_dev;  // flow only: max MC standard deviation with pi = 0
};

struct LimitRow {
  std::size_t i = 0;
  double t = 0, Theta = 0, Theta_target = 0, Sigma2 = 0, Sigma2_target = 0, drift = 0, drift_target = 0;
};

// Compares the small-theta RDBM coefficients with the closed-form limits:
//   Theta -> 1 - t/T for every variant,
//   Sigma^2 -> t (1 - t/T) (brownian), sigma^2 t (T - t)/T (ve, vp; sigma^2 = 2 lambda theta), 0 (flow),
//   drift -> 1/(T - t) (brownian, ve, flow), sigma^2 coth(sigma^2 (T - t)) (vp).
inline std::vector<LimitRow> limit_rows(VariantKind kind, const ScheduleSpec& spec, const BridgeCoefficients& c) {
  std::vector<LimitRow> rows;
  const double T = spec.horizon;
  const double sigma2 = 2.0 * spec.lambda * spec.theta_min;
  const double pi2 = kind == VariantKind::deterministic_pi0 ? 0.0 : 1.0;
  for (std::size_t i = 0; i <= c.steps(); ++i) {
    LimitRow r;
    r.i = i;
    r.t = c.t[i];
    r.Theta = c.Theta[i];
    r.Theta_target = 1.0 - r.t / T;
    r.Sigma2 = pi2 * c.Sigma[i] * c.Sigma[i];
    switch (kind) {
      case VariantKind::brownian: r.Sigma2_target = r.t * (1.0 - r.t / T); break;
      case VariantKind::deterministic_pi0: r.Sigma2_target = 0.0; break;
      default: r.Sigma2_target = sigma2 * r.t * (T - r.t) / T; break;
    }
    if (i < c.steps()) {
      r.drift = bridge_drift_coefficient(spec, r.t);
      r.drift_target = kind == VariantKind::vp_bridge ? sigma2 / std::tanh(sigma2 * (T - r.t)) : 1.0 / (T - r.t);
    } else {
      r.drift = r.drift_target = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(r);
  }
  return rows;
}

inline LimitDeviation summarize_limits(const std::vector<LimitRow>& rows) {
  LimitDeviation d;
  for (const auto& r : rows) {
    d.theta_dev = std::max(d.theta_dev, std::abs(r.Theta - r.Theta_target));
    d.sigma2_dev = std::max(d.sigma2_dev, std::abs(r.Sigma2 - r.Sigma2_target));
    if (std::isfinite(r.drift)) d.drift_dev = std::max(d.drift_dev, std::abs(r.drift - r.drift_target) / r.drift_target);
  }
  return d;
}

inline double flow_stochastic_deviation(const ScheduleSpec& spec, std::uint64_t seed) {
  SimConfig sim;
  sim.trajectories = 1000;
  sim.substeps_per_cell = 8;
  sim.seed = seed;
  double worst = 0.0;
  for (const auto& m : euler_maruyama_forward(spec, 1.0, 0.0, 0.0, sim)) worst = std::max(worst, std::sqrt(m.var));
  return worst;
}

inline double scalar_pi(const BridgeVariant& v, double x0, double mu) {
  return variant_pi(v, TensorGrid({1}, x0), TensorGrid({1}, mu))[0];
}

struct VerifyOptions {
  std::optional<std::size_t> trajectories;
  double corrupt_sigma = 1.0;  // test hook: scales the analytic Sigma in the MC comparison
};

inline int run_verify(const GlobalOptions& g, const VerifyOptions& v, std::ostream& log) {
  RunConfig cfg = resolve_config(g);
  if (v.trajectories) cfg.sim.trajectories = *v.trajectories;
  if (cfg.sim.trajectories < 1000) throw UsageError("verify: --trajectories must be >= 1000");
  cfg.sim.seed = cfg.seed.value_or(42);
  const ScheduleSpec spec = cfg.variant.limit_spec(cfg.schedule);
  const double x0 = cfg.verify_x0, mu = cfg.verify_mu;
  const double pi = scalar_pi(cfg.variant, x0, mu);
  const auto report_path = output_path(g, "verify.csv");
  const auto checks_path = sibling(report_path, "_checks.csv");
  nlohmann::json resolved{{"schedule", spec},
                          {"variant", cfg.variant},
                          {"sim", cfg.sim},
                          {"seed", cfg.sim.seed},
                          {"x0", x0},
                          {"mu", mu},
                          {"pi", pi},
                          {"workers", cfg.sim.workers ? cfg.sim.workers : worker_count()},
                          {"out", report_path.string()},
                          {"checks", checks_path.string()}};
  if (v.corrupt_sigma != 1.0) resolved["corrupt_sigma"] = v.corrupt_sigma;
  print_resolved(log, "verify", resolved);

  const BridgeCoefficients c = compute_coefficients(spec);
  std::vector<CheckResult> checks;
  auto add = [&](std::string name, bool pass, std::string detail) {
    checks.push_back({std::move(name), pass, std::move(detail)});
  };

  const auto rows = compare_moments(euler_maruyama_forward(spec, x0, mu, pi, cfg.sim), c, x0, mu, pi, v.corrupt_sigma);
  {
    std::size_t bad_mean = 0, bad_var = 0;
    for (const auto& r : rows) {
      bad_mean += !r.mean_ok;
      bad_var += !r.var_ok;
    }
    add("mc_mean", bad_mean == 0, std::to_string(rows.size() - bad_mean) + "/" + std::to_string(rows.size()) + " grid points");
    add("mc_variance", bad_var == 0, std::to_string(rows.size() - bad_var) + "/" + std::to_string(rows.size()) + " grid points");
  }
  {
    const double e = oracle_recovery_error(c, cfg.sim.seed);
    add("oracle_recovery", e <= 1e-8, "max relative error " + format_number(e, 3));
  }
  {
    const double e = drift_identity_error(spec, cfg.sim.endpoint_clip, cfg.sim.seed);
    add("drift_identity", e <= 1e-10, "max relative error " + format_number(e, 3));
  }
  {
    const double e = psi_quadrature_error(spec);
    add("psi_quadrature", e <= 1e-8, "max absolute error " + format_number(e, 3));
  }
  {
    bool decreasing = true;
    for (std::size_t i = 1; i <= c.steps(); ++i) decreasing = decreasing && c.R[i] < c.R[i - 1];
    add("rtn_monotone", decreasing, decreasing ? "R strictly decreasing" : "R not strictly decreasing");
  }
  {
    const auto p = posterior_agreement(c, cfg.sim.seed);
    add("posterior_agreement", p.moment_error <= 1e-10 && p.constraint_error <= 1e-12,
        "moments " + format_number(p.moment_error, 3) + ", constraints " + format_number(p.constraint_error, 3));
  }
  {
    const double theta = cfg.variant.small_theta;
    const ScheduleSpec bb = BridgeVariant{VariantKind::brownian, theta}.limit_spec(cfg.schedule);
    const auto db = summarize_limits(limit_rows(VariantKind::brownian, bb, compute_coefficients(bb)));
    const ScheduleSpec ve = BridgeVariant{VariantKind::ve_bridge, theta}.limit_spec(cfg.schedule);
    const auto dv = summarize_limits(limit_rows(VariantKind::ve_bridge, ve, compute_coefficients(ve)));
    const ScheduleSpec fm = BridgeVariant{VariantKind::deterministic_pi0, theta}.limit_spec(cfg.schedule);
    const double flow = flow_stochastic_deviation(fm, cfg.sim.seed);
    add("variant_limits", db.theta_dev < 1e-6 && db.sigma2_dev < 1e-6 && dv.drift_dev <= 1e-4 && flow == 0.0,
        "brownian Theta " + format_number(db.theta_dev, 3) + ", Sigma^2 " + format_number(db.sigma2_dev, 3) +
            "; ve drift " + format_number(dv.drift_dev, 3) + "; flow stochastic " + format_number(flow, 3));
  }

  write_text_file(report_path, [&](std::ostream& os) {
    std::vector<std::vector<std::string>> table;
    for (const auto& r : rows) {
      table.push_back({format_number(r.t), format_number(r.analytic_mean), format_number(r.mc_mean),
                       format_number(r.mean_se), format_number(r.analytic_var), format_number(r.mc_var),
                       format_number(r.var_se), r.mean_ok && r.var_ok ? "1" : "0"});
    }
    write_csv(os, {"t", "analytic_mean", "mc_mean", "mean_se", "analytic_var", "mc_var", "var_se", "pass"}, table);
  });
  write_text_file(checks_path, [&](std::ostream& os) {
    std::vector<std::vector<std::string>> table;
    for (const auto& ch : checks) table.push_back({ch.name, ch.pass ? "1" : "0", ch.detail});
    write_csv(os, {"check", "pass", "detail"}, table);
  });

  bool all = true;
  for (const auto& ch : checks) {
    log << "check " << ch.name << ": " << (ch.pass ? "PASS" : "FAIL") << " (" << ch.detail << ")\n";
    all = all && ch.pass;
  }
  if (!all) {
    log << "verify failed:";
    for (const auto& ch : checks) {
      if (!ch.pass) log << ' ' << ch.name;
    }
    log << "\n";
  }
  return all ? kExitPass : kExitFail;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::optional<std::filesystem::path> trace;
};

inline nlohmann::json training_metadata(const RunConfig& cfg, std::uint64_t seed) {
  return {{"schedule", cfg.schedule}, {"variant", cfg.variant}, {"data", data_json(cfg)},
          {"train", cfg.train},       {"model", cfg.model},     {"seed", seed}};
}

inline int run_train(const GlobalOptions& g, const TrainOptions& t, std::ostream& log) {
  RunConfig cfg = resolve_config(g);
  const std::uint64_t seed = cfg.seed.value_or(7);
  cfg.train.seed = seed;
  cfg.data.seed = seed;
  const auto model_path = output_path(g, "model.bin");
  const auto trace_path = t.trace ? *t.trace : sibling(model_path, "_trace.csv");
  nlohmann::json resolved = training_metadata(cfg, seed);
  resolved["out"] = model_path.string();
  resolved["trace"] = trace_path.string();
  print_resolved(log, "train", resolved);

  const auto train_set = make_toy_dataset(cfg.data, cfg.train_size);
  const TrainResult result = train(cfg.train, cfg.model, cfg.schedule, train_set, cfg.variant);
  write_model_file(model_path, result.params, training_metadata(cfg, seed));
  write_text_file(trace_path, [&](std::ostream& os) {
    std::vector<std::vector<std::string>> table;
    for (const auto& p : result.trace) table.push_back({std::to_string(p.iteration), format_number(p.loss)});
    write_csv(os, {"iteration", "loss"}, table);
  });

  const double first = result.trace.front().loss, last = result.trace.back().loss;
  log << "loss " << format_number(first, 6) << " -> " << format_number(last, 6) << " (ratio "
      << format_number(first / last, 4) << ")\n";
  const auto holdout = make_toy_dataset(cfg.data, cfg.holdout_size, stream_id("holdout"));
  SampleOptions so;
  so.seed = seed;
  so.variant = cfg.variant;
  const auto rep = evaluate_restoration(result.params, compute_coefficients(cfg.schedule), holdout, so);
  log << "held-out PSNR degraded " << format_number(rep.degraded_psnr, 6) << " dB, restored "
      << format_number(rep.restored_psnr, 6) << " dB\n";
  return kExitPass;
}

// ---------------------------------------------------------------------------
// sample

struct LoadedModel {
  ModelFile file;
  ScheduleSpec schedule;
  BridgeVariant variant;
  RunConfig run;  // data/train sections as recorded at training time
  std::uint64_t seed = 0;
};

inline LoadedModel load_model(const std::filesystem::path& path, std::optional<std::size_t> steps = std::nullopt) {
  LoadedModel m{read_model_file(path), {}, {}, {}, 0};
  const auto& meta = m.file.metadata;
  m.schedule = meta.at("schedule").get<ScheduleSpec>();
  if (steps) {
    m.schedule.steps = *steps;
    m.schedule.validate();
  }
  m.variant = meta.at("variant").get<BridgeVariant>();
  read_data_section(meta.at("data"), m.run);
  m.seed = meta.at("seed").get<std::uint64_t>();
  m.run.data.seed = m.seed;
  return m;
}

struct SampleCliOptions {
  std::filesystem::path model;
  std::filesystem::path degraded;
  std::optional<std::size_t> steps;
  std::string mode = "ddim";
};

// Restores every s x s tile (edge-replicated at the borders) of every channel.
inline TensorGrid restore_image(const DenoiserParams& params, const BridgeCoefficients& coeffs, const TensorGrid& img,
                                const SampleOptions& base) {
  const auto& shape = img.shape();
  if (shape.size() != 2 && !(shape.size() == 3 && (shape[2] == 1 || shape[2] == 3))) {
    throw ShapeError("sample: expected an {h, w} or {h, w, c} image, got " + shape_string(img));
  }
  const std::size_t h = shape[0], w = shape[1], ch = shape.size() == 3 ? shape[2] : 1;
  const std::size_t s = params.config.image_size;
  const Predictor predictor = make_predictor(params, coeffs.steps());
  const RandomStream tiles(base.seed, stream_id("sample_tiles"));
  TensorGrid out(shape);
  std::uint64_t tile_index = 0;
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t r0 = 0; r0 < h; r0 += s) {
      for (std::size_t c0 = 0; c0 < w; c0 += s) {
        TensorGrid mu({s, s});
        for (std::size_t r = 0; r < s; ++r) {
          for (std::size_t q = 0; q < s; ++q) {
            const std::size_t rr = std::min(r0 + r, h - 1), cc = std::min(c0 + q, w - 1);
            mu[r * s + q] = img[(rr * w + cc) * ch + c];
          }
        }
        SampleOptions opts = base;
        opts.seed = tiles.substream(tile_index++).stream();
        const TensorGrid x = sample_loop(predictor, mu, coeffs, coeffs.steps(), opts);
        for (std::size_t r = 0; r < s && r0 + r < h; ++r) {
          for (std::size_t q = 0; q < s && c0 + q < w; ++q) out[((r0 + r) * w + c0 + q) * ch + c] = x[r * s + q];
        }
      }
    }
  }
  return out;
}

inline int run_sample(const GlobalOptions& g, const SampleCliOptions& o, std::ostream& log) {
  LoadedModel m = load_model(o.model, o.steps);
  const std::uint64_t seed = g.seed.value_or(m.seed);
  const auto out_path = output_path(g, "restored.pgm");
  SampleOptions so;
  so.mode = parse_sampler_mode(o.mode);
  so.variant = m.variant;
  so.seed = seed;
  print_resolved(log, "sample",
                 {{"model", o.model.string()},
                  {"degraded", o.degraded.string()},
                  {"schedule", m.schedule},
                  {"variant", m.variant},
                  {"mode", o.mode},
                  {"steps", m.schedule.steps},
                  {"seed", seed},
                  {"out", out_path.string()}});
  const BridgeCoefficients coeffs = compute_coefficients(m.schedule);
  attach_schedule(m.file.params, coeffs);
  const TensorGrid degraded = read_image_or_tensor(o.degraded);
  const TensorGrid restored = restore_image(m.file.params, coeffs, degraded, so);
  write_image_or_tensor(out_path, restored);
  log << "wrote " << shape_string(restored) << " restoration to " << out_path.string() << "\n";
  return kExitPass;
}

// ---------------------------------------------------------------------------
// reduce

struct ReduceOptions {
  std::string variant = "brownian";
  double theta = 1e-5;
};

inline VariantKind parse_reduce_variant(const std::string& name) {
  if (name == "flow") return VariantKind::deterministic_pi0;
  const VariantKind k = parse_variant(name);
  if (k != VariantKind::brownian && k != VariantKind::ve_bridge && k != VariantKind::vp_bridge &&
      k != VariantKind::deterministic_pi0) {
    throw UsageError("reduce: --variant must be brownian|ve|vp|flow");
  }
  return k;
}

inline int run_reduce(const GlobalOptions& g, const ReduceOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(g);
  if (!(o.theta > 0.0)) throw UsageError("reduce: --theta must be > 0");
  const VariantKind kind = parse_reduce_variant(o.variant);
  const BridgeVariant variant{kind, o.theta};
  const ScheduleSpec spec = variant.limit_spec(cfg.schedule);
  const std::uint64_t seed = cfg.seed.value_or(42);
  const auto table_path = output_path(g, "reduce.csv");
  const auto summary_path = sibling(table_path, "_summary.csv");
  print_resolved(log, "reduce",
                 {{"variant", std::string(to_string(kind))},
                  {"theta", o.theta},
                  {"schedule", spec},
                  {"seed", seed},
                  {"out", table_path.string()},
                  {"summary", summary_path.string()}});

  const BridgeCoefficients c = compute_coefficients(spec);
  const auto rows = limit_rows(kind, spec, c);
  LimitDeviation d = summarize_limits(rows);
  if (kind == VariantKind::deterministic_pi0) d.stochastic_dev = flow_stochastic_deviation(spec, seed);

  write_text_file(table_path, [&](std::ostream& os) {
    std::vector<std::vector<std::string>> table;
    for (const auto& r : rows) {
      table.push_back({std::to_string(r.i), format_number(r.t), format_number(r.Theta), format_number(r.Theta_target),
                       format_number(std::abs(r.Theta - r.Theta_target)), format_number(r.Sigma2),
                       format_number(r.Sigma2_target), format_number(std::abs(r.Sigma2 - r.Sigma2_target)),
                       format_number(r.drift), format_number(r.drift_target)});
    }
    write_csv(os,
              {"i", "t", "Theta", "Theta_target", "Theta_dev", "Sigma2", "Sigma2_target", "Sigma2_dev", "drift",
               "drift_target"},
              table);
  });
  std::vector<std::vector<std::string>> summary{{"max_abs_dev_Theta", format_number(d.theta_dev)},
                                                {"max_abs_dev_Sigma2", format_number(d.sigma2_dev)},
                                                {"max_rel_dev_drift", format_number(d.drift_dev)}};
  if (d.stochastic_dev) summary.push_back({"stochastic_deviation", format_number(*d.stochastic_dev)});
  write_text_file(summary_path, [&](std::ostream& os) { write_csv(os, {"metric", "value"}, summary); });
  for (const auto& row : summary) log << row[0] << " = " << row[1] << "\n";
  return kExitPass;
}

// ---------------------------------------------------------------------------
// noisemap

struct NoisemapOptions {
  std::filesystem::path model;
  std::optional<std::size_t> step;
  std::optional<std::size_t> count;
};

// Tiles equally sized maps into one image, eight per row, one-pixel gaps.
inline TensorGrid mosaic(const std::vector<TensorGrid>& maps, double scale) {
  const std::size_t s = maps.front().shape()[0];
  const std::size_t cols = std::min<std::size_t>(8, maps.size());
  const std::size_t rows = (maps.size() + cols - 1) / cols;
  const std::size_t H = rows * (s + 1) - 1, W = cols * (s + 1) - 1;
  TensorGrid out({H, W}, 0.0);
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const std::size_t r0 = (k / cols) * (s + 1), c0 = (k % cols) * (s + 1);
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) out[(r0 + r) * W + c0 + c] = maps[k][r * s + c] * scale;
    }
  }
  return out;
}

inline int run_noisemap(const GlobalOptions& g, const NoisemapOptions& o, std::ostream& log) {
  LoadedModel m = load_model(o.model);
  const std::uint64_t seed = g.seed.value_or(m.seed);
  const std::size_t step = o.step.value_or(m.schedule.steps / 2);
  if (step < 1 || step > m.schedule.steps) {
    throw UsageError("noisemap: --step must be in [1, " + std::to_string(m.schedule.steps) + "]");
  }
  const std::size_t count = o.count.value_or(m.run.holdout_size);
  if (count < 1) throw UsageError("noisemap: --count must be >= 1");
  const auto prefix = output_path(g, "noisemap");
  print_resolved(log, "noisemap",
                 {{"model", o.model.string()},
                  {"schedule", m.schedule},
                  {"data", data_json(m.run)},
                  {"step", step},
                  {"count", count},
                  {"seed", seed},
                  {"out", prefix.string()}});

  const BridgeCoefficients coeffs = compute_coefficients(m.schedule);
  attach_schedule(m.file.params, coeffs);
  const auto data = make_toy_dataset(m.run.data, count, stream_id("holdout"));
  struct ModeResult {
    const char* name;
    NoiseMapSummary summary;
    std::vector<TensorGrid> maps;
  };
  std::vector<ModeResult> modes{{"rdbm", {}, {}}, {"pi1", {}, {}}};
  const BridgeVariant variants[] = {BridgeVariant{VariantKind::rdbm}, BridgeVariant{VariantKind::global_noise_pi1}};
  double peak = 0.0;
  for (std::size_t k = 0; k < modes.size(); ++k) {
    modes[k].summary = noise_map_summary(m.file.params, coeffs, data, variants[k], step, seed, &modes[k].maps);
    for (const auto& mp : modes[k].maps) {
      for (double v : mp.values()) peak = std::max(peak, v);
    }
  }
  std::vector<std::vector<std::string>> summary;
  for (const auto& md : modes) {
    write_pnm_file(sibling(prefix, std::string("_") + md.name + ".pgm"), mosaic(md.maps, peak > 0 ? 1.0 / peak : 0.0));
    summary.push_back({md.name, std::to_string(step), format_number(md.summary.degraded_mean_abs),
                       format_number(md.summary.intact_mean_abs)});
    log << md.name << ": mean |pred| degraded " << format_number(md.summary.degraded_mean_abs, 6) << ", intact "
        << format_number(md.summary.intact_mean_abs, 6) << "\n";
  }
  write_text_file(sibling(prefix, "_summary.csv"), [&](std::ostream& os) {
    write_csv(os, {"mode", "step", "degraded_mean_abs", "intact_mean_abs"}, summary);
  });
  return kExitPass;
}

}  // namespace rdbm::cli
