// rdbm: command-line front end for the residual diffusion bridge library.

#include <iostream>

#include <CLI11.hpp>

#include "rdbm/commands.hpp"

namespace {

template <typename T>
void set_if(std::optional<T>& dst, const T& value, const CLI::Option* opt) {
  if (opt->count() > 0) dst = value;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace rdbm::cli;
  CLI::App app{"Residual diffusion bridge toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_path;
  std::uint64_t seed = 0;
  auto* config_opt = app.add_option("--config", config_path, "JSON config (schedule or sectioned run config)");
  auto* seed_opt = app.add_option("--seed", seed, "Root seed for every random stream");
  auto* out_opt = app.add_option("--out", out_path, "Output path or prefix");

  auto* tabulate = app.add_subcommand("tabulate", "Write the coefficient table (CSV) and plot (SVG)");

  VerifyOptions verify_opts;
  std::size_t trajectories = 0;
  auto* verify = app.add_subcommand("verify", "Monte Carlo and analytic self-checks; exit 0 iff all pass");
  auto* traj_opt = verify->add_option("--trajectories", trajectories, "Monte Carlo trajectories (>= 1000)");
  verify->add_option("--corrupt-sigma", verify_opts.corrupt_sigma, "Scale the analytic Sigma (negative control)")
      ->group("");

  TrainOptions train_opts;
  std::string trace_path;
  auto* train = app.add_subcommand("train", "Train the pi*eps predictor on a toy degradation set");
  auto* trace_opt = train->add_option("--trace", trace_path, "Loss trace CSV");

  SampleCliOptions sample_opts;
  std::size_t steps = 0;
  auto* sample = app.add_subcommand("sample", "Restore a degraded image with a trained model");
  sample->add_option("--model", sample_opts.model, "Model file")->required();
  sample->add_option("--degraded", sample_opts.degraded, "Degraded image (.pgm/.ppm or tensor file)")->required();
  auto* steps_opt = sample->add_option("--steps", steps, "Sampling steps N (default: training N)");
  sample->add_option("--mode", sample_opts.mode, "ddim or posterior")->check(CLI::IsMember({"ddim", "posterior"}));

  ReduceOptions reduce_opts;
  auto* reduce = app.add_subcommand("reduce", "Deviation of small-theta coefficients from limit bridges");
  reduce->add_option("--variant", reduce_opts.variant, "brownian|ve|vp|flow")
      ->check(CLI::IsMember({"brownian", "ve", "vp", "flow"}));
  reduce->add_option("--theta", reduce_opts.theta, "Small constant theta");

  NoisemapOptions noise_opts;
  std::size_t step = 0, count = 0;
  auto* noisemap = app.add_subcommand("noisemap", "|prediction| maps of a trained model for both pi modes");
  noisemap->add_option("--model", noise_opts.model, "Model file")->required();
  auto* step_opt = noisemap->add_option("--step", step, "Grid index i (default N/2)");
  auto* count_opt = noisemap->add_option("--count", count, "Held-out images (default: training holdout size)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitPass : kExitUsage;
  }

  GlobalOptions g;
  if (config_opt->count()) g.config = config_path;
  set_if(g.seed, seed, seed_opt);
  if (out_opt->count()) g.out = out_path;

  try {
    if (*tabulate) return run_tabulate(g, std::cout);
    if (*verify) {
      set_if(verify_opts.trajectories, trajectories, traj_opt);
      return run_verify(g, verify_opts, std::cout);
    }
    if (*train) {
      if (trace_opt->count()) train_opts.trace = trace_path;
      return run_train(g, train_opts, std::cout);
    }
    if (*sample) {
      set_if(sample_opts.steps, steps, steps_opt);
      return run_sample(g, sample_opts, std::cout);
    }
    if (*reduce) return run_reduce(g, reduce_opts, std::cout);
    if (*noisemap) {
      set_if(noise_opts.step, step, step_opt);
      set_if(noise_opts.count, count, count_opt);
      return run_noisemap(g, noise_opts, std::cout);
    }
  } catch (const rdbm::TrainingDivergedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  } catch (const rdbm::ConsistencyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
