#pragma once

// Command implementations behind the `dvi` executable. Each returns a process
// exit code: 0 success, 1 verification failure, 2 configuration error,
// 3 numerical failure.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dvi/config.hpp"
#include "dvi/datasets.hpp"
#include "dvi/model_io.hpp"
#include "dvi/oracle.hpp"
#include "dvi/trainkit.hpp"

namespace dvi::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kNumericalError = 3 };

namespace detail {

inline nlohmann::json epoch_json(const std::string& run_id, const std::string& hash, const EpochRecord& r) {
  nlohmann::json j{{"run_id", run_id}, {"config_hash", hash}, {"epoch", r.epoch}, {"train_elbo", r.train_elbo},
                   {"wall_seconds", r.wall_seconds}};
  j["test_ll"] = std::isfinite(r.test_ll) ? nlohmann::json(r.test_ll) : nlohmann::json(nullptr);
  return j;
}

struct RunOutcome {
  bool ok = false;
  double test_ll = std::nan("");
  std::string error;
};

// One training run; epoch records are appended to metrics_path as JSON lines.
inline TrainResult run_one(const NetworkSpec& spec, const Split& sp, const TrainConfig& tc,
                           const std::filesystem::path& metrics_path, const std::string& run_id,
                           const std::string& hash) {
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw StructuralError("cannot write metrics file " + metrics_path.string());
  return train(spec, sp, tc, [&](const EpochRecord& r) { metrics << epoch_json(run_id, hash, r).dump() << '\n'; });
}

}  // namespace detail

inline int cmd_train(const std::filesystem::path& config_path, std::ostream& err = std::cerr) {
  config::TrainJob job;
  Dataset ds;
  try {
    job = config::parse_train(config::detail::read_json(config_path), config_path.parent_path());
    ds = load_csv(job.dataset.path, job.dataset.name);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const NetworkSpec spec = config::make_spec(job.model, static_cast<int>(ds.dim()), job.method.head);
    const Split sp = split(ds, job.split_seed, job.train_fraction);
    std::filesystem::create_directories(job.output_dir);
    const std::string hash = config::config_hash(job.raw);
    const std::string run_id = ds.name + "-" + job.method.name + "-s" + std::to_string(job.split_seed);
    const auto metrics_path = job.output_dir / "metrics.jsonl";
    const TrainResult res = detail::run_one(spec, sp, job.train, metrics_path, run_id, hash);
    ModelArtifact art;
    art.spec = effective_spec(spec, job.train.inference);
    art.params = res.params;
    art.inference = job.train.inference;
    art.eval_samples = job.train.eval_samples;
    art.seed = job.train.seed;
    art.stats = sp.stats;
    art.dropped_indices = ds.dropped_indices;
    art.original_width = ds.original_width;
    save_model(job.output_dir / "model.json", art);
    std::cout << "run " << run_id << ": " << res.metrics.epochs.size() << " epochs, final test LL "
              << res.metrics.final_test_ll << "\n";
    return kOk;
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const StructuralError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }
}

struct GridCell {
  std::string dataset, method, prior;
  std::vector<double> test_ll;
  int failed = 0;
};

inline int cmd_benchmark(const std::filesystem::path& config_path, int jobs, std::ostream& err = std::cerr) {
  config::BenchmarkJob job;
  std::vector<Dataset> data;
  try {
    job = config::parse_benchmark(config::detail::read_json(config_path), config_path.parent_path());
    for (const auto& d : job.datasets) data.push_back(load_csv(d.path, d.name));
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  if (jobs <= 0) jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  struct Task {
    std::size_t cell;
    std::size_t dataset;
    config::MethodSpec method;
    PriorConfig prior;
    int split;
  };
  std::vector<GridCell> cells;
  std::vector<Task> tasks;
  for (std::size_t d = 0; d < data.size(); ++d) {
    std::vector<std::pair<std::string, PriorConfig>> priors{{"eb", job.train.prior}};
    if (!job.train.prior.empirical_bayes) priors.front().first = "fixed:" + std::to_string(job.train.prior.fixed_variance);
    for (const auto& m : job.methods) {
      for (const auto& [label, pc] : priors) {
        cells.push_back({data[d].name, m.name, label, {}, 0});
        for (int s = 0; s < job.splits; ++s) tasks.push_back({cells.size() - 1, d, m, pc, s});
      }
    }
    for (double v : job.prior_sweep) {
      PriorConfig pc = job.train.prior;
      pc.empirical_bayes = false;
      pc.fixed_variance = v;
      std::ostringstream label;
      label << "fixed:" << v;
      cells.push_back({data[d].name, "DVI", label.str(), {}, 0});
      for (int s = 0; s < job.splits; ++s) tasks.push_back({cells.size() - 1, d, config::parse_method("DVI"), pc, s});
    }
  }

  std::filesystem::create_directories(job.output_dir / "metrics");
  const std::string hash = config::config_hash(job.raw);
  std::vector<detail::RunOutcome> outcomes(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      const GridCell& c = cells[t.cell];
      std::string prior_tag = c.prior;
      std::replace(prior_tag.begin(), prior_tag.end(), ':', '-');
      const std::string run_id = c.dataset + "__" + c.method + "__" + prior_tag + "__split" + std::to_string(t.split);
      try {
        const Dataset& ds = data[t.dataset];
        const NetworkSpec spec = config::make_spec(job.model, static_cast<int>(ds.dim()), t.method.head);
        const Split sp = split(ds, job.split_seed + static_cast<std::uint64_t>(t.split), job.train_fraction);
        TrainConfig tc = job.train;
        config::detail::apply_method(tc, t.method);
        tc.prior = t.prior;
        tc.seed = job.train.seed + static_cast<std::uint64_t>(t.split);
        const auto path = job.output_dir / "metrics" / (run_id + ".jsonl");
        std::filesystem::remove(path);
        const TrainResult r = detail::run_one(spec, sp, tc, path, run_id, hash);
        outcomes[i] = {true, r.metrics.final_test_ll, {}};
      } catch (const std::exception& e) {
        outcomes[i] = {false, std::nan(""), e.what()};
      }
      std::lock_guard<std::mutex> lock(log_mutex);
      if (outcomes[i].ok) {
        err << run_id << ": test LL " << outcomes[i].test_ll << '\n';
      } else {
        err << run_id << ": FAILED: " << outcomes[i].error << '\n';
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  bool any_failed = false;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    GridCell& c = cells[tasks[i].cell];
    if (outcomes[i].ok && std::isfinite(outcomes[i].test_ll)) {
      c.test_ll.push_back(outcomes[i].test_ll);
    } else {
      ++c.failed;
      any_failed = true;
    }
  }
  std::ofstream summary(job.output_dir / "summary.csv");
  summary << "dataset,method,prior,mean_test_ll,stderr,splits,failed\n";
  summary << std::setprecision(10);
  for (const GridCell& c : cells) {
    const double n = static_cast<double>(c.test_ll.size());
    double mean = std::nan(""), se = std::nan("");
    if (n > 0) {
      mean = 0.0;
      for (double v : c.test_ll) mean += v;
      mean /= n;
    }
    if (n > 1) {
      double ss = 0.0;
      for (double v : c.test_ll) ss += (v - mean) * (v - mean);
      se = std::sqrt(ss / (n - 1.0) / n);
    }
    summary << c.dataset << ',' << c.method << ',' << c.prior << ',';
    if (n > 0) summary << mean;
    summary << ',';
    if (n > 1) summary << se;
    summary << ',' << c.test_ll.size() << ',' << c.failed << '\n';
  }
  return any_failed ? kNumericalError : kOk;
}

struct VerifyOptions {
  std::string kind = "relu";
  double mu_min = -6.0, mu_max = 6.0, mu_step = 1.0;
  std::vector<double> rho = oracle::default_rho_list();
  double tolerance = 0.02;
  std::filesystem::path out_dir = "verify";
  long samples = 20000;
  std::uint64_t seed = 0;
  std::filesystem::path model;
  double x = 0.25;
};

inline int cmd_verify(const VerifyOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::filesystem::create_directories(opt.out_dir);
  if (opt.kind == "relu" || opt.kind == "heaviside") {
    if (!(opt.mu_step > 0.0) || opt.mu_max < opt.mu_min) {
      err << "config error: invalid mu grid\n";
      return kConfigError;
    }
    for (double r : opt.rho) {
      if (!(std::abs(r) <= 0.999)) {
        err << "config error: rho values must satisfy |rho| <= 0.999\n";
        return kConfigError;
      }
    }
    const Nonlinearity kind = opt.kind == "relu" ? Nonlinearity::kReLU : Nonlinearity::kHeaviside;
    std::vector<double> grid;
    for (double m = opt.mu_min; m <= opt.mu_max + 1e-9; m += opt.mu_step) grid.push_back(m);
    const auto rows = oracle::residual_map(kind, grid, opt.rho);
    std::ofstream csv(opt.out_dir / ("residual_" + opt.kind + ".csv"));
    oracle::write_residual_csv(csv, rows);
    const oracle::ResidualRow* worst = &rows.front();
    bool pass = true;
    for (const auto& r : rows) {
      const double tol = r.rho == 0.0 ? 1e-12 : opt.tolerance;
      if (r.abs_err > tol) pass = false;
      if (r.abs_err > worst->abs_err) worst = &r;
    }
    out << opt.kind << ": " << rows.size() << " grid points, max abs error " << worst->abs_err << " at (mu1=" << worst->mu1
        << ", mu2=" << worst->mu2 << ", rho=" << worst->rho << ") " << (pass ? "PASS" : "FAIL") << '\n';
    return pass ? kOk : kVerifyFailed;
  }
  if (opt.kind == "toy") {
    ModelArtifact art;
    if (!opt.model.empty()) {
      try {
        art = load_model(opt.model);
      } catch (const std::exception& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
      }
    } else {
      art.spec.layer_sizes = {1, 128, 128, 2};
      art.params = init_params(art.spec, opt.seed);
    }
    art.spec.cov_mode = CovMode::kFull;
    Vector x(art.spec.layer_sizes.front());
    x.setConstant(opt.x);
    const GaussianActivation dvi = dvi_forward(art.spec, art.params, x);
    const oracle::MCMoments mc = oracle::mc_forward(art.spec, art.params, x, opt.samples, opt.seed + 1);
    const oracle::AgreementReport rep = oracle::compare_to_mc(dvi, mc);
    std::ofstream csv(opt.out_dir / "toy_moments.csv");
    csv << "component,dvi_mean,mc_mean,mc_mean_se,dvi_std,mc_std,mc_std_se\n" << std::setprecision(12);
    for (Eigen::Index j = 0; j < dvi.dim(); ++j) {
      csv << j << ',' << dvi.mean(j) << ',' << mc.mean(j) << ',' << mc.mean_se(j) << ',' << std::sqrt(dvi.cov(j, j))
          << ',' << mc.std(j) << ',' << mc.std_se(j) << '\n';
    }
    const bool pass = rep.worst_z <= 3.0;
    out << "toy: worst deviation " << rep.worst_z << " standard errors at " << rep.worst << ' '
        << (pass ? "PASS" : "FAIL") << '\n';
    return pass ? kOk : kVerifyFailed;
  }
  err << "config error: --kind must be relu, heaviside or toy\n";
  return kConfigError;
}

inline int cmd_predict(const std::filesystem::path& model_path, const std::filesystem::path& input,
                       const std::filesystem::path& output, std::ostream& err = std::cerr) {
  ModelArtifact art;
  try {
    art = load_model(model_path);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  std::ifstream in(input);
  if (!in) {
    err << "config error: cannot open input " << input << '\n';
    return kConfigError;
  }
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (dvi::detail::trim(line).empty()) continue;
    const auto cells = dvi::detail::split_commas(line);
    std::vector<double> v(cells.size());
    bool numeric = true;
    for (std::size_t c = 0; c < cells.size() && numeric; ++c) numeric = dvi::detail::parse_double(cells[c], v[c]);
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;  // header
      err << "config error: non-numeric cell on input row " << line_no << '\n';
      return kConfigError;
    }
    if (static_cast<int>(v.size()) != art.original_width) {
      err << "config error: input row " << line_no << " has " << v.size() << " columns, model expects "
          << art.original_width << '\n';
      return kConfigError;
    }
    rows.push_back(std::move(v));
  }
  const Eigen::Index d = art.spec.layer_sizes.front();
  Matrix x(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Eigen::Index k = 0;
    for (int c = 0; c < art.original_width; ++c) {
      if (std::find(art.dropped_indices.begin(), art.dropped_indices.end(), c) != art.dropped_indices.end()) continue;
      x(static_cast<Eigen::Index>(i), k) = (rows[i][static_cast<std::size_t>(c)] - art.stats.x_mean(k)) / art.stats.x_std(k);
      ++k;
    }
  }
  std::ofstream out(output);
  if (!out) {
    err << "config error: cannot write " << output << '\n';
    return kConfigError;
  }
  out << "row,mean,std\n" << std::setprecision(12);
  if (rows.empty()) return kOk;
  const Predictions pr = predict(art.spec, art.params, x, art.inference, art.eval_samples, art.seed);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out << i << ',' << pr.mean(i) * art.stats.y_std + art.stats.y_mean << ',' << std::sqrt(pr.var(i)) * art.stats.y_std
        << '\n';
  }
  return kOk;
}

}  // namespace dvi::cli
