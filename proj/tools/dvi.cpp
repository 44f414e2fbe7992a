#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "dvi/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deterministic variational inference for Bayesian neural networks"};
  app.require_subcommand(1);

  std::string train_config;
  auto* train = app.add_subcommand("train", "train one model from a JSON config");
  train->add_option("--config", train_config, "run configuration")->required();

  std::string bench_config;
  int jobs = 0;
  auto* bench = app.add_subcommand("benchmark", "run a dataset x method x split grid");
  bench->add_option("--config", bench_config, "benchmark configuration")->required();
  bench->add_option("--jobs", jobs, "worker threads (default: logical cores)");

  dvi::cli::VerifyOptions vopt;
  std::vector<double> grid;
  auto* verify = app.add_subcommand("verify", "compare closed forms against quadrature or sampling");
  verify->add_option("--kind", vopt.kind, "relu, heaviside or toy")->check(CLI::IsMember({"relu", "heaviside", "toy"}));
  verify->add_option("--grid", grid, "mu grid as: min max step")->expected(3);
  verify->add_option("--rho", vopt.rho, "correlations to sweep");
  verify->add_option("--tol", vopt.tolerance, "absolute tolerance on the cross moment");
  verify->add_option("--out", vopt.out_dir, "directory for CSV artifacts");
  verify->add_option("--samples", vopt.samples, "Monte Carlo samples for --kind toy");
  verify->add_option("--seed", vopt.seed, "seed for initialization and sampling");
  verify->add_option("--model", vopt.model, "trained model artifact for --kind toy");
  verify->add_option("--x", vopt.x, "input value for --kind toy");

  std::string model, input, output;
  auto* predict = app.add_subcommand("predict", "predictive mean and std for rows of a CSV");
  predict->add_option("--model", model, "model artifact written by train")->required();
  predict->add_option("--input", input, "CSV of feature rows")->required();
  predict->add_option("--output", output, "CSV to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dvi::cli::kConfigError;
  }

  if (*train) return dvi::cli::cmd_train(train_config);
  if (*bench) return dvi::cli::cmd_benchmark(bench_config, jobs);
  if (*verify) {
    if (grid.size() == 3) {
      vopt.mu_min = grid[0];
      vopt.mu_max = grid[1];
      vopt.mu_step = grid[2];
    }
    return dvi::cli::cmd_verify(vopt);
  }
  if (*predict) return dvi::cli::cmd_predict(model, input, output);
  return dvi::cli::kConfigError;
}
