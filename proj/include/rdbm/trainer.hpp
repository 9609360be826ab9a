#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rdbm/bridge.hpp"
#include "rdbm/errors.hpp"
#include "rdbm/metrics_io.hpp"
#include "rdbm/random.hpp"
#include "rdbm/samplers.hpp"
#include "rdbm/schedules.hpp"
#include "rdbm/tensor.hpp"

namespace rdbm {

// ===========================================================================
// Toy degradation datasets

enum class DegradationKind { mask_streaks, global_darken, box_blur };

inline std::string_view to_string(DegradationKind k) {
  switch (k) {
    case DegradationKind::mask_streaks: return "mask_streaks";
    case DegradationKind::global_darken: return "global_darken";
    case DegradationKind::box_blur: return "box_blur";
  }
  return "?";
}

inline DegradationKind parse_degradation(std::string_view s) {
  if (s == "mask_streaks") return DegradationKind::mask_streaks;
  if (s == "global_darken") return DegradationKind::global_darken;
  if (s == "box_blur") return DegradationKind::box_blur;
  throw std::invalid_argument("unknown degradation kind '" + std::string(s) + "'");
}

struct DegradationSpec {
  DegradationKind kind = DegradationKind::mask_streaks;
  std::size_t streaks = 2;        // vertical streaks per image
  std::size_t streak_width = 2;   // columns per streak
  double streak_strength = 0.7;   // blend weight towards white inside a streak
  double darken_factor = 0.5;
  std::size_t blur_radius = 1;
  std::size_t image_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 2) throw std::invalid_argument("degradation: image_size must be >= 2");
    if (kind == DegradationKind::mask_streaks) {
      if (streak_width < 1 || streaks * streak_width > image_size) {
        throw std::invalid_argument("degradation: streaks do not fit in the image");
      }
      if (!(streak_strength > 0.0 && streak_strength <= 1.0)) {
        throw std::invalid_argument("degradation: streak_strength must be in (0, 1]");
      }
    }
    if (kind == DegradationKind::global_darken && !(darken_factor > 0.0 && darken_factor < 1.0)) {
      throw std::invalid_argument("degradation: darken factor must be in (0, 1)");
    }
    if (kind == DegradationKind::box_blur && blur_radius < 1) {
      throw std::invalid_argument("degradation: blur radius must be >= 1");
    }
  }
};

struct ToyPair {
  TensorGrid x0;
  TensorGrid mu;
  TensorGrid mask;  // 1 where the degradation touched the pixel
};

// Smooth field: 0.5 plus three random low-frequency plane waves, clipped to
// [0.02, 0.98] so a white streak always leaves a nonzero residual.
inline TensorGrid smooth_field(std::size_t size, RandomStream& rng) {
  TensorGrid img({size, size}, 0.5);
  const double n = static_cast<double>(size);
  for (int wave = 0; wave < 3; ++wave) {
    const double amp = 0.1 + 0.15 * rng.uniform();
    const double fx = 0.5 + 2.5 * rng.uniform();
    const double fy = 0.5 + 2.5 * rng.uniform();
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        img[r * size + c] += amp * std::sin(2.0 * std::numbers::pi * (fx * c + fy * r) / n + phase);
      }
    }
  }
  for (auto& v : img.raw()) v = std::clamp(v, 0.02, 0.98);
  return img;
}

inline ToyPair degrade(const DegradationSpec& spec, TensorGrid x0, RandomStream& rng) {
  const std::size_t s = spec.image_size;
  ToyPair p{x0, x0, TensorGrid(x0.shape(), 0.0)};
  switch (spec.kind) {
    case DegradationKind::mask_streaks: {
      std::vector<bool> used(s, false);
      for (std::size_t k = 0; k < spec.streaks; ++k) {
        std::size_t col = 0;
        do {
          col = static_cast<std::size_t>(rng.uniform_int(0, s - spec.streak_width));
        } while ([&] {
          for (std::size_t w = 0; w < spec.streak_width; ++w) {
            if (used[col + w]) return true;
          }
          return false;
        }());
        for (std::size_t w = 0; w < spec.streak_width; ++w) used[col + w] = true;
      }
      for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) {
          if (!used[c]) continue;
          const std::size_t k = r * s + c;
          p.mu[k] = (1.0 - spec.streak_strength) * x0[k] + spec.streak_strength;
          p.mask[k] = 1.0;
        }
      }
      break;
    }
    case DegradationKind::global_darken:
      for (std::size_t k = 0; k < x0.size(); ++k) {
        p.mu[k] = spec.darken_factor * x0[k];
        p.mask[k] = p.mu[k] != x0[k] ? 1.0 : 0.0;
      }
      break;
    case DegradationKind::box_blur: {
      const auto rad = static_cast<long>(spec.blur_radius);
      const auto n = static_cast<long>(s);
      for (long r = 0; r < n; ++r) {
        for (long c = 0; c < n; ++c) {
          double acc = 0.0;
          for (long dr = -rad; dr <= rad; ++dr) {
            for (long dc = -rad; dc <= rad; ++dc) {
              const long rr = std::clamp(r + dr, 0L, n - 1);
              const long cc = std::clamp(c + dc, 0L, n - 1);
              acc += x0[static_cast<std::size_t>(rr * n + cc)];
            }
          }
          const auto k = static_cast<std::size_t>(r * n + c);
          p.mu[k] = acc / static_cast<double>((2 * rad + 1) * (2 * rad + 1));
          p.mask[k] = p.mu[k] != x0[k] ? 1.0 : 0.0;
        }
      }
      break;
    }
  }
  return p;
}

// Train and held-out sets come from the same seed through different streams.
inline std::vector<ToyPair> make_toy_dataset(const DegradationSpec& spec, std::size_t n,
                                             std::uint64_t stream = stream_id("dataset")) {
  if (n < 1) throw std::invalid_argument("make_toy_dataset: n must be >= 1");
  spec.validate();
  std::vector<ToyPair> out;
  out.reserve(n);
  const RandomStream root(spec.seed, stream);
  for (std::size_t k = 0; k < n; ++k) {
    RandomStream rng = root.substream(k);
    out.push_back(degrade(spec, smooth_field(spec.image_size, rng), rng));
  }
  return out;
}

// ===========================================================================
// Fully connected predictor of pi * eps

// Input layout: [state patch, mu patch, time embedding]. The state patch is
// x_t itself or the offset x_t - mu; both carry the same information given mu.
enum class InputEncoding { state, offset };

// noise: the network output is the pi * eps estimate itself.
// residual: the network estimates the residual r and the predictor returns
// (x_t - mu - r Theta_i) / Sigma_i, the pi * eps implied by that estimate.
enum class OutputMode { noise, residual };

struct ModelConfig {
  std::size_t image_size = 16;
  std::vector<std::size_t> hidden{128, 128};
  std::size_t time_embed_dim = 16;
  InputEncoding encoding = InputEncoding::state;
  OutputMode output = OutputMode::noise;

  std::size_t pixels() const { return image_size * image_size; }
  std::size_t input_dim() const { return 2 * pixels() + time_embed_dim; }
};

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t offset = 0;  // start of W (row-major out x in), followed by b
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Eigen peels unaligned heads off vectorised loops, so the summation order of a
// Map over plain heap memory depends on where the block landed. Parameters and
// gradients use Eigen's aligned allocator to keep training bit-reproducible.
using ParamVector = std::vector<double, Eigen::aligned_allocator<double>>;

// All weights live in one flat vector so optimiser state, finite-difference
// checks and serialisation can treat them uniformly.
struct DenoiserParams {
  ModelConfig config;
  std::vector<LayerShape> layers;
  ParamVector flat;
  // Per-step map pi*eps = skip[i] (x_t - mu) + gain[i] y for OutputMode::residual.
  std::vector<double> out_skip;
  std::vector<double> out_gain;

  explicit DenoiserParams(ModelConfig cfg = {}) : config(std::move(cfg)) {
    std::vector<std::size_t> dims{config.input_dim()};
    dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
    dims.push_back(config.pixels());
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      layers.push_back({dims[l], dims[l + 1], offset});
      offset += dims[l] * dims[l + 1] + dims[l + 1];
    }
    flat.assign(offset, 0.0);
  }

  Eigen::Map<RowMatrix> weight(std::size_t l) {
    return {flat.data() + layers[l].offset, static_cast<Eigen::Index>(layers[l].out),
            static_cast<Eigen::Index>(layers[l].in)};
  }
  Eigen::Map<const RowMatrix> weight(std::size_t l) const {
    return {flat.data() + layers[l].offset, static_cast<Eigen::Index>(layers[l].out),
            static_cast<Eigen::Index>(layers[l].in)};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) {
    return {flat.data() + layers[l].offset + layers[l].in * layers[l].out, static_cast<Eigen::Index>(layers[l].out)};
  }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {flat.data() + layers[l].offset + layers[l].in * layers[l].out, static_cast<Eigen::Index>(layers[l].out)};
  }

  bool all_finite() const {
    for (double v : flat) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

// Binds the residual output map to a coefficient grid; a no-op for noise output.
inline void attach_schedule(DenoiserParams& p, const BridgeCoefficients& coeffs) {
  p.out_skip.clear();
  p.out_gain.clear();
  if (p.config.output == OutputMode::noise) return;
  p.out_skip.assign(coeffs.steps() + 1, 0.0);
  p.out_gain.assign(coeffs.steps() + 1, 0.0);
  for (std::size_t i = 1; i <= coeffs.steps(); ++i) {
    const auto s = step_coefficients(coeffs, i);
    p.out_skip[i] = 1.0 / s.sigma_cur;
    p.out_gain[i] = -s.theta_cur / s.sigma_cur;
  }
}

// Glorot-uniform weights, zero biases.
inline DenoiserParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  DenoiserParams p(cfg);
  RandomStream rng(seed, stream_id("init"));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(p.layers[l].in + p.layers[l].out));
    auto w = p.weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return p;
}

// Sinusoidal embedding of u = i / N with frequencies pi/2 * 2^k.
inline void time_embedding(std::size_t i, std::size_t steps, std::size_t dim, double* out) {
  const double u = static_cast<double>(i) / static_cast<double>(steps);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    const double w = 0.5 * std::numbers::pi * std::ldexp(1.0, static_cast<int>(k));
    out[2 * k] = std::sin(w * u);
    out[2 * k + 1] = std::cos(w * u);
  }
  if (dim % 2) out[dim - 1] = u;
}

namespace detail {

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
inline double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;   // pre-activations per layer
  std::vector<Eigen::MatrixXd> post;  // post[0] = input, post[l + 1] = activation of layer l
};

inline Eigen::MatrixXd forward_batch(const DenoiserParams& p, const Eigen::MatrixXd& input, ForwardCache* cache) {
  Eigen::MatrixXd a = input;
  if (cache) {
    cache->pre.clear();
    cache->post.assign(1, input);
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    Eigen::MatrixXd z = p.weight(l) * a;
    z.colwise() += p.bias(l);
    const bool last = l + 1 == p.layers.size();
    if (cache) cache->pre.push_back(z);
    a = last ? z : z.unaryExpr([](double v) { return silu(v); }).eval();
    if (cache && !last) cache->post.push_back(a);
  }
  return a;
}

struct OutputMap {
  double skip = 0.0;
  double gain = 1.0;
};

inline OutputMap output_map(const DenoiserParams& p, std::size_t i, std::size_t steps) {
  if (p.config.output == OutputMode::noise) return {};
  if (p.out_gain.size() != steps + 1) {
    throw std::invalid_argument("predictor: residual output needs a schedule with N = " + std::to_string(steps) +
                                " attached");
  }
  return {p.out_skip[i], p.out_gain[i]};
}

// pi*eps for every column of `input`; `raw` receives the network output.
inline Eigen::MatrixXd predict_batch(const DenoiserParams& p, const Eigen::MatrixXd& input,
                                     const std::vector<std::size_t>& steps_of_column, std::size_t steps,
                                     ForwardCache* cache) {
  Eigen::MatrixXd y = forward_batch(p, input, cache);
  if (p.config.output == OutputMode::noise) return y;
  const auto px = static_cast<Eigen::Index>(p.config.pixels());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const auto m = output_map(p, steps_of_column[static_cast<std::size_t>(c)], steps);
    Eigen::VectorXd offset = input.col(c).head(px);
    if (p.config.encoding == InputEncoding::state) offset -= input.col(c).segment(px, px);
    y.col(c) = m.skip * offset + m.gain * y.col(c);
  }
  return y;
}

}  // namespace detail

inline void fill_input_column(const ModelConfig& cfg, const TensorGrid& x_t, std::size_t i, std::size_t steps,
                              const TensorGrid& mu, Eigen::Ref<Eigen::VectorXd> col) {
  const std::size_t px = cfg.pixels();
  if (x_t.size() != px || mu.size() != px) {
    throw ShapeError("predictor: expected " + std::to_string(px) + " pixels, got " + shape_string(x_t) + " and " +
                     shape_string(mu));
  }
  const bool offset = cfg.encoding == InputEncoding::offset;
  for (std::size_t k = 0; k < px; ++k) {
    col[static_cast<Eigen::Index>(k)] = offset ? x_t[k] - mu[k] : x_t[k];
    col[static_cast<Eigen::Index>(px + k)] = mu[k];
  }
  time_embedding(i, steps, cfg.time_embed_dim, col.data() + 2 * px);
}

inline TensorGrid predictor_forward(const DenoiserParams& params, const TensorGrid& x_t, std::size_t i,
                                    std::size_t steps, const TensorGrid& mu) {
  require_same_shape(x_t, mu, "predictor_forward");
  Eigen::MatrixXd input(static_cast<Eigen::Index>(params.config.input_dim()), 1);
  fill_input_column(params.config, x_t, i, steps, mu, input.col(0));
  const Eigen::MatrixXd out = detail::predict_batch(params, input, {i}, steps, nullptr);
  TensorGrid result(x_t.shape());
  for (std::size_t k = 0; k < result.size(); ++k) result[k] = out(static_cast<Eigen::Index>(k), 0);
  return result;
}

inline Predictor make_predictor(const DenoiserParams& params, std::size_t steps) {
  return [&params, steps](const TensorGrid& x_t, std::size_t i, const TensorGrid& mu) {
    return predictor_forward(params, x_t, i, steps, mu);
  };
}

// ===========================================================================
// Objective

enum class LossMode { l1, elbo_weighted_l2 };

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "l1") return LossMode::l1;
  if (s == "elbo_weighted_l2") return LossMode::elbo_weighted_l2;
  throw std::invalid_argument("unknown loss mode '" + std::string(s) + "'");
}

inline std::string_view to_string(LossMode m) { return m == LossMode::l1 ? "l1" : "elbo_weighted_l2"; }

// Mean |pred - pi*eps| (l1) or mean weight * (pred - pi*eps)^2.
inline double loss(const TensorGrid& pred, const TensorGrid& pi, const TensorGrid& eps, LossMode mode,
                   double weight = 1.0) {
  require_same_shape(pred, pi, "loss");
  require_same_shape(pred, eps, "loss");
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = pred[k] - pi[k] * eps[k];
    acc += mode == LossMode::l1 ? std::abs(d) : weight * d * d;
  }
  return acc / static_cast<double>(pred.size());
}

// ELBO weights C_i; unit weights keep the optional mode on the same scale as L1.
inline double elbo_weight(std::size_t /*i*/) { return 1.0; }

struct TrainingBatch {
  Eigen::MatrixXd inputs;   // input_dim x B
  Eigen::MatrixXd targets;  // pixels x B
  std::vector<std::size_t> steps;
  std::size_t grid_steps = 0;  // N of the coefficient grid
};

// Draws (pair, i, eps) per batch slot and builds x_i = mu + (x0 - mu) Theta_i + pi Sigma_i eps
// with target pi * eps. At i = N (x_N = mu) the target is the pi * eps that
// explains x_N under the virtual terminal coefficients, matching the sampler.
inline TrainingBatch make_batch(const ModelConfig& cfg, const std::vector<ToyPair>& data,
                                const BridgeCoefficients& coeffs, const BridgeVariant& variant,
                                std::size_t batch_size, RandomStream& rng) {
  if (data.empty()) throw std::invalid_argument("make_batch: empty dataset");
  const std::size_t n = coeffs.steps();
  const std::size_t px = cfg.pixels();
  TrainingBatch b;
  b.inputs.resize(static_cast<Eigen::Index>(cfg.input_dim()), static_cast<Eigen::Index>(batch_size));
  b.targets.resize(static_cast<Eigen::Index>(px), static_cast<Eigen::Index>(batch_size));
  b.steps.resize(batch_size);
  b.grid_steps = n;
  for (std::size_t s = 0; s < batch_size; ++s) {
    const auto& pair = data[rng.uniform_int(0, data.size() - 1)];
    const std::size_t i = rng.uniform_int(1, n);
    const TensorGrid pi = variant_pi(variant, pair.x0, pair.mu);
    TensorGrid eps(pair.x0.shape());
    for (auto& e : eps.raw()) e = rng.normal();
    TensorGrid x_t;
    const auto col = static_cast<Eigen::Index>(s);
    if (i < n) {
      x_t = forward_sample(pair.x0, pair.mu, pi, coeffs, i, eps);
      for (std::size_t k = 0; k < px; ++k) b.targets(static_cast<Eigen::Index>(k), col) = pi[k] * eps[k];
    } else {
      x_t = pair.mu;
      for (std::size_t k = 0; k < px; ++k) {
        const double r = pair.x0[k] - pair.mu[k];
        b.targets(static_cast<Eigen::Index>(k), col) =
            pi[k] == 0.0 || r == 0.0 ? 0.0 : -r * coeffs.terminal_Theta / coeffs.terminal_Sigma;
      }
    }
    fill_input_column(cfg, x_t, i, n, pair.mu, b.inputs.col(col));
    b.steps[s] = i;
  }
  return b;
}

struct LossGradient {
  double loss = 0.0;
  ParamVector grad;
};

// Reverse-mode gradient of the batch loss. d|r|/dr at r = 0 is taken as 0.
inline LossGradient loss_and_gradient(const DenoiserParams& params, const TrainingBatch& batch, LossMode mode,
                                      double scale = 1.0) {
  detail::ForwardCache cache;
  const Eigen::MatrixXd pred = detail::predict_batch(params, batch.inputs, batch.steps, batch.grid_steps, &cache);
  const Eigen::MatrixXd diff = pred - batch.targets;
  const double count = static_cast<double>(diff.size());
  LossGradient out;
  Eigen::MatrixXd delta(diff.rows(), diff.cols());
  double acc = 0.0;
  for (Eigen::Index c = 0; c < diff.cols(); ++c) {
    const double w = mode == LossMode::l1 ? 1.0 : elbo_weight(batch.steps[static_cast<std::size_t>(c)]);
    for (Eigen::Index r = 0; r < diff.rows(); ++r) {
      const double d = diff(r, c);
      if (mode == LossMode::l1) {
        acc += std::abs(d);
        delta(r, c) = scale * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / count;
      } else {
        acc += w * d * d;
        delta(r, c) = scale * 2.0 * w * d / count;
      }
    }
  }
  out.loss = scale * acc / count;
  for (Eigen::Index c = 0; c < delta.cols(); ++c) {
    delta.col(c) *= detail::output_map(params, batch.steps[static_cast<std::size_t>(c)], batch.grid_steps).gain;
  }

  DenoiserParams grads(params.config);
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    grads.weight(l) = delta * cache.post[l].transpose();
    grads.bias(l) = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = params.weight(l).transpose() * delta;
    delta = back.cwiseProduct(cache.pre[l - 1].unaryExpr([](double z) { return detail::silu_grad(z); }));
  }
  out.grad = std::move(grads.flat);
  return out;
}

inline double batch_loss(const DenoiserParams& params, const TrainingBatch& batch, LossMode mode) {
  const Eigen::MatrixXd diff =
      detail::predict_batch(params, batch.inputs, batch.steps, batch.grid_steps, nullptr) - batch.targets;
  double acc = 0.0;
  for (Eigen::Index c = 0; c < diff.cols(); ++c) {
    const double w = mode == LossMode::l1 ? 1.0 : elbo_weight(batch.steps[static_cast<std::size_t>(c)]);
    for (Eigen::Index r = 0; r < diff.rows(); ++r) {
      const double d = diff(r, c);
      acc += mode == LossMode::l1 ? std::abs(d) : w * d * d;
    }
  }
  return acc / static_cast<double>(diff.size());
}

// Samples a batch from `data` and returns the loss gradient.
inline LossGradient gradient(const DenoiserParams& params, const std::vector<ToyPair>& data,
                             const BridgeCoefficients& coeffs, const BridgeVariant& variant, std::size_t batch_size,
                             LossMode mode, RandomStream& rng) {
  const TrainingBatch b = make_batch(params.config, data, coeffs, variant, batch_size, rng);
  return loss_and_gradient(params, b, mode);
}

// ===========================================================================
// Adam

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t iterations = 5000;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  LossMode loss_mode = LossMode::l1;
  std::size_t trace_every = 50;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
    if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (trace_every < 1) throw std::invalid_argument("train: trace interval must be >= 1");
  }
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter/gradient/state sizes differ");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k];
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[k] / c1;
    const double v_hat = state.v[k] / c2;
    params[k] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
}

// ===========================================================================
// Training loop

struct TracePoint {
  std::size_t iteration = 0;  // iterations completed
  double loss = 0.0;          // mean batch loss over the window
};

struct TrainResult {
  DenoiserParams params;
  std::vector<TracePoint> trace;
};

inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const ScheduleSpec& schedule,
                         const std::vector<ToyPair>& data, const BridgeVariant& variant) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const BridgeCoefficients coeffs = compute_coefficients(schedule);
  TrainResult result{init_params(model, cfg.seed), {}};
  attach_schedule(result.params, coeffs);
  AdamState state(result.params.flat.size());
  double window = 0.0;
  std::size_t window_count = 0;
  const RandomStream root(cfg.seed, stream_id("train"));
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    RandomStream rng = root.substream(it);
    const TrainingBatch batch = make_batch(model, data, coeffs, variant, cfg.batch_size, rng);
    auto lg = loss_and_gradient(result.params, batch, cfg.loss_mode);
    if (!std::isfinite(lg.loss)) {
      throw TrainingDivergedError("train: non-finite loss at iteration " + std::to_string(it));
    }
    adam_step(result.params.flat, lg.grad, state, cfg);
    window += lg.loss;
    ++window_count;
    if ((it + 1) % cfg.trace_every == 0 || it + 1 == cfg.iterations) {
      result.trace.push_back({it + 1, window / static_cast<double>(window_count)});
      window = 0.0;
      window_count = 0;
    }
  }
  if (!result.params.all_finite()) throw TrainingDivergedError("train: non-finite parameters");
  return result;
}

// ===========================================================================
// Model file: "RDBM", u32 version, u32 layer count, (u32 in, u32 out) per
// layer, f64 LE weights, then u32 length + embedded JSON.

inline constexpr std::uint32_t kModelFileVersion = 1;

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"image_size", m.image_size},
       {"hidden", m.hidden},
       {"time_embed_dim", m.time_embed_dim},
       {"encoding", m.encoding == InputEncoding::offset ? "offset" : "state"},
       {"output", m.output == OutputMode::residual ? "residual" : "noise"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") {
      m.image_size = value.get<std::size_t>();
    } else if (key == "hidden") {
      m.hidden = value.get<std::vector<std::size_t>>();
    } else if (key == "time_embed_dim") {
      m.time_embed_dim = value.get<std::size_t>();
    } else if (key == "encoding") {
      const auto e = value.get<std::string>();
      if (e != "state" && e != "offset") throw std::invalid_argument("model config: encoding must be state|offset");
      m.encoding = e == "offset" ? InputEncoding::offset : InputEncoding::state;
    } else if (key == "output") {
      const auto o = value.get<std::string>();
      if (o != "noise" && o != "residual") throw std::invalid_argument("model config: output must be noise|residual");
      m.output = o == "residual" ? OutputMode::residual : OutputMode::noise;
    } else {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  if (m.image_size < 2 || m.time_embed_dim < 1) throw std::invalid_argument("model config: bad dimensions");
}

struct ModelFile {
  DenoiserParams params;
  nlohmann::json metadata;  // model/schedule/train/data/variant as used for training
};

inline void write_model(std::ostream& os, const DenoiserParams& params, const nlohmann::json& metadata) {
  os.write("RDBM", 4);
  io_detail::put_u32(os, kModelFileVersion);
  io_detail::put_u32(os, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    io_detail::put_u32(os, static_cast<std::uint32_t>(l.in));
    io_detail::put_u32(os, static_cast<std::uint32_t>(l.out));
  }
  for (double v : params.flat) io_detail::put_f64(os, v);
  nlohmann::json meta = metadata;
  meta["model"] = params.config;
  const std::string text = meta.dump();
  io_detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline ModelFile read_model(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "RDBM", 4) != 0) throw FormatError("read_model: bad magic");
  const auto version = io_detail::get_u32(is, "read_model");
  if (version != kModelFileVersion) throw FormatError("read_model: unsupported version");
  const auto count = io_detail::get_u32(is, "read_model");
  if (count == 0 || count > 64) throw FormatError("read_model: bad layer count");
  std::vector<std::pair<std::size_t, std::size_t>> dims(count);
  for (auto& [in, out] : dims) {
    in = io_detail::get_u32(is, "read_model");
    out = io_detail::get_u32(is, "read_model");
  }
  ParamVector flat;
  for (auto [in, out] : dims) {
    if (in == 0 || out == 0 || in > (1u << 20) || out > (1u << 20)) throw FormatError("read_model: dimension overflow");
    for (std::size_t k = 0; k < in * out + out; ++k) flat.push_back(io_detail::get_f64(is, "read_model weights"));
  }
  const auto len = io_detail::get_u32(is, "read_model");
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw FormatError("read_model: truncated metadata");
  ModelFile mf{DenoiserParams(), nlohmann::json::parse(text)};
  mf.params = DenoiserParams(mf.metadata.at("model").get<ModelConfig>());
  if (mf.params.layers.size() != count) throw FormatError("read_model: layer count does not match metadata");
  for (std::size_t l = 0; l < count; ++l) {
    if (mf.params.layers[l].in != dims[l].first || mf.params.layers[l].out != dims[l].second) {
      throw FormatError("read_model: layer dims do not match metadata");
    }
  }
  mf.params.flat = std::move(flat);
  return mf;
}

inline void write_model_file(const std::filesystem::path& path, const DenoiserParams& params,
                             const nlohmann::json& metadata) {
  io_detail::with_output_file(path, [&](std::ostream& os) { write_model(os, params, metadata); });
}

inline ModelFile read_model_file(const std::filesystem::path& path) {
  auto is = io_detail::open_input(path);
  return read_model(is);
}

// ===========================================================================
// Evaluation helpers

struct RestorationReport {
  double degraded_psnr = 0.0;  // mean over images of psnr(x0, mu)
  double restored_psnr = 0.0;  // mean over images of psnr(x0, sample)
};

inline RestorationReport evaluate_restoration(const DenoiserParams& params, const BridgeCoefficients& coeffs,
                                              const std::vector<ToyPair>& data, const SampleOptions& opts = {}) {
  RestorationReport rep;
  const Predictor predictor = make_predictor(params, coeffs.steps());
  for (std::size_t k = 0; k < data.size(); ++k) {
    SampleOptions o = opts;
    o.seed = opts.seed + k;
    const TensorGrid restored = sample_loop(predictor, data[k].mu, coeffs, coeffs.steps(), o);
    rep.degraded_psnr += psnr(data[k].x0, data[k].mu);
    rep.restored_psnr += psnr(data[k].x0, restored);
  }
  rep.degraded_psnr /= static_cast<double>(data.size());
  rep.restored_psnr /= static_cast<double>(data.size());
  return rep;
}

struct NoiseMapSummary {
  double degraded_mean_abs = 0.0;  // mean |pred| over pixels with mask = 1
  double intact_mean_abs = 0.0;    // mean |pred| over pixels with mask = 0
};

// |prediction| maps at step i for inputs built with the variant's pi rule.
inline NoiseMapSummary noise_map_summary(const DenoiserParams& params, const BridgeCoefficients& coeffs,
                                         const std::vector<ToyPair>& data, const BridgeVariant& variant,
                                         std::size_t i, std::uint64_t seed, std::vector<TensorGrid>* maps = nullptr) {
  NoiseMapSummary s;
  double n_deg = 0.0, n_int = 0.0;
  const RandomStream root(seed, stream_id("noisemap"));
  for (std::size_t k = 0; k < data.size(); ++k) {
    RandomStream rng = root.substream(k);
    const auto& pair = data[k];
    const TensorGrid pi = variant_pi(variant, pair.x0, pair.mu);
    TensorGrid eps(pair.x0.shape());
    for (auto& e : eps.raw()) e = rng.normal();
    const TensorGrid x_t = forward_sample(pair.x0, pair.mu, pi, coeffs, i, eps);
    TensorGrid pred = predictor_forward(params, x_t, i, coeffs.steps(), pair.mu);
    for (std::size_t p = 0; p < pred.size(); ++p) {
      pred[p] = std::abs(pred[p]);
      if (pair.mask[p] != 0.0) {
        s.degraded_mean_abs += pred[p];
        n_deg += 1;
      } else {
        s.intact_mean_abs += pred[p];
        n_int += 1;
      }
    }
    if (maps) maps->push_back(std::move(pred));
  }
  if (n_deg > 0) s.degraded_mean_abs /= n_deg;
  if (n_int > 0) s.intact_mean_abs /= n_int;
  return s;
}

}  // namespace rdbm
