#pragma once

// ELBO assembly, Adam, the minibatch training loop and test-set evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dvi/datasets.hpp"
#include "dvi/ebprior.hpp"
#include "dvi/heads.hpp"
#include "dvi/mcvi.hpp"
#include "dvi/moment_graph.hpp"
#include "dvi/network.hpp"
#include "dvi/rng.hpp"

namespace dvi {

enum class Inference { kDVI, kDDVI, kMCVI };

struct PriorConfig {
  bool empirical_bayes = true;
  double alpha = 1.0;
  double beta = 10.0;
  double fixed_variance = 1.0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 0;  // 0 selects min(128, N)
  int epochs = 2000;
  std::uint64_t seed = 0;
  Inference inference = Inference::kDVI;
  MCVIConfig mc{};
  PriorConfig prior{};
  int eval_samples = 100;  // MCVI predictive samples at test time
  int eval_every = 1;
};

struct EpochRecord {
  int epoch = 0;
  double train_elbo = 0.0;  // per datum
  double test_ll = 0.0;     // per datum, original units
  double wall_seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  double final_test_ll = 0.0;
};

struct TrainResult {
  ModelParams params;
  RunMetrics metrics;
};

// DVI / dDVI use the closed-form moment graph; MCVI the sampled estimator.
inline NetworkSpec effective_spec(NetworkSpec spec, Inference inf) {
  if (inf == Inference::kDDVI) spec.cov_mode = CovMode::kDiagonal;
  return spec;
}

inline std::vector<double> weight_prior_variances(const ModelParams& p, const PriorConfig& prior) {
  std::vector<double> out;
  if (prior.empirical_bayes) {
    const HierarchicalPrior hp = eb_update(make_layerwise_prior(p.layers, prior.alpha, prior.beta), p.layers);
    for (const auto& ps : hp.partitions) out.push_back(ps.s_star);
  } else {
    out.assign(p.layers.size(), prior.fixed_variance);
  }
  return out;
}

// (N / B) * reconstruction - KL. The EB variances enter as constants.
inline grad::Var assemble_elbo(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const ModelParams& p,
                               const PriorConfig& prior, const Matrix& x, const Matrix& y, Eigen::Index dataset_size,
                               Inference inf, const MCVIConfig& mc, std::uint64_t step) {
  if (x.rows() == 0) throw StructuralError("assemble_elbo: empty batch");
  const NetworkSpec s = effective_spec(spec, inf);
  grad::Var rec = inf == Inference::kMCVI ? mc_reconstruction(t, s, pv, x, y, mc, step)
                                          : dvi_reconstruction(t, s, pv, x, y);
  const double scale = static_cast<double>(dataset_size) / static_cast<double>(x.rows());
  grad::Var scaled = scale == 1.0 ? rec : rec * scale;
  return scaled - kl_total(t, pv, weight_prior_variances(p, prior));
}

struct AdamState {
  std::map<std::string, Matrix> m, v;
  long step = 0;
};

inline void adam_step(std::map<std::string, Matrix>& params, const std::map<std::string, Matrix>& grads,
                      AdamState& st, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (auto& [name, value] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Matrix& g = git->second;
    if (g.rows() != value.rows() || g.cols() != value.cols())
      throw StructuralError("adam_step: gradient shape mismatch for " + name);
    Matrix& m = st.m[name];
    Matrix& v = st.v[name];
    if (m.size() == 0) {
      m = Matrix::Zero(g.rows(), g.cols());
      v = Matrix::Zero(g.rows(), g.cols());
    }
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

// Predictive mean and variance per row in standardized target units.
struct Predictions {
  Vector mean, var;
};

inline Predictions predict_dvi(const NetworkSpec& spec, const ModelParams& p, const Matrix& x) {
  grad::Tape t;
  const ParamVars pv = register_params(t, spec, p);
  const BatchMoments out = dvi_forward_batch(t, spec, pv, x);
  const RegressionColumns c = regression_columns(t, spec, pv, out);
  Predictions pr;
  const Eigen::Index n = x.rows();
  pr.mean = t.value(c.m).col(0);
  pr.var.resize(n);
  const Matrix& smm = t.value(c.s_mm);
  const Matrix& l = t.value(c.l);
  const Matrix& sll = t.value(c.s_ll);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double li = l.rows() == 1 ? l(0, 0) : l(i, 0);
    pr.var(i) = predictive_regression({pr.mean(i), li, smm(i, 0), sll(i, 0), 0.0}).second;
  }
  return pr;
}

// Moment-matched Gaussian predictive from sampled networks.
inline Predictions predict_mc(const NetworkSpec& spec, const ModelParams& p, const Matrix& x, int samples,
                              std::uint64_t seed) {
  const Eigen::Index n = x.rows();
  Vector s1 = Vector::Zero(n), s2 = Vector::Zero(n);
  for (int s = 0; s < samples; ++s) {
    std::vector<SampledLayer> layers;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const LayerParams& lp = p.layers[l];
      KeyedStream ws(seed, 0, static_cast<std::uint64_t>(s), 2 * l);
      KeyedStream bs(seed, 0, static_cast<std::uint64_t>(s), 2 * l + 1);
      SampledLayer sl;
      sl.weight = lp.weight_mean +
                  (0.5 * lp.weight_logvar.array()).exp().matrix().cwiseProduct(ws.normal_matrix(lp.fan_in(), lp.fan_out()));
      sl.bias = lp.bias_mean + (0.5 * lp.bias_logvar.array()).exp().matrix().cwiseProduct(
                                   Vector(bs.normal_matrix(lp.fan_out(), 1)));
      layers.push_back(std::move(sl));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector out = deterministic_forward(spec, layers, x.row(i).transpose());
      const double lv = spec.head == Head::kHomoRegression ? p.log_noise : out(1);
      s1(i) += out(0);
      s2(i) += out(0) * out(0) + std::exp(lv);
    }
  }
  Predictions pr;
  pr.mean = s1 / samples;
  pr.var = (s2 / samples - pr.mean.cwiseProduct(pr.mean)).cwiseMax(1e-300);
  return pr;
}

inline Predictions predict(const NetworkSpec& spec, const ModelParams& p, const Matrix& x, Inference inf,
                           int eval_samples, std::uint64_t seed) {
  if (inf == Inference::kMCVI) return predict_mc(spec, p, x, eval_samples, seed ^ 0x7e57ULL);
  return predict_dvi(effective_spec(spec, inf), p, x);
}

// Mean Gaussian predictive log-likelihood of the test targets, original units.
inline double evaluate_test_ll(const NetworkSpec& spec, const ModelParams& p, const Split& s, Inference inf,
                               int eval_samples = 100, std::uint64_t seed = 0) {
  const Predictions pr = predict(spec, p, s.x_test, inf, eval_samples, seed);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pr.mean.size(); ++i) acc += gaussian_log_density(s.y_test(i, 0), pr.mean(i), pr.var(i));
  return destandardize_ll(acc / static_cast<double>(pr.mean.size()), s.stats.y_std);
}

namespace detail {

inline std::string param_norms(const std::map<std::string, Matrix>& blocks) {
  std::ostringstream os;
  for (const auto& [k, v] : blocks) os << " " << k << "=" << v.norm();
  return os.str();
}

inline bool all_finite(const std::map<std::string, Matrix>& g) {
  for (const auto& [k, v] : g)
    if (!v.allFinite()) return false;
  return true;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const NetworkSpec& spec, const Split& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  spec.validate();
  if (spec.layer_sizes.front() != data.x_train.cols())
    throw StructuralError("train: network input width " + std::to_string(spec.layer_sizes.front()) +
                          " does not match data width " + std::to_string(data.x_train.cols()));
  const NetworkSpec eff = effective_spec(spec, cfg.inference);
  eff.validate();
  TrainResult res;
  res.params = init_params(spec, cfg.seed);
  std::map<std::string, Matrix> blocks = res.params.to_blocks(spec);
  AdamState adam;
  const Eigen::Index n = data.x_train.rows();
  const Eigen::Index bsz = cfg.batch_size > 0 ? std::min<Eigen::Index>(cfg.batch_size, n) : std::min<Eigen::Index>(128, n);
  const auto start = std::chrono::steady_clock::now();
  std::uint64_t step = 0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    KeyedStream shuffle_stream(cfg.seed, static_cast<std::uint64_t>(epoch), 0, 0xba7c4ULL);
    std::mt19937_64& shuffle_gen = shuffle_stream.engine();
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_gen() % (i + 1))]);
    }
    double elbo_acc = 0.0;
    int batches = 0;
    for (Eigen::Index b0 = 0; b0 < n; b0 += bsz) {
      const Eigen::Index b1 = std::min(n, b0 + bsz);
      Matrix xb(b1 - b0, data.x_train.cols()), yb(b1 - b0, 1);
      for (Eigen::Index k = b0; k < b1; ++k) {
        xb.row(k - b0) = data.x_train.row(order[static_cast<std::size_t>(k)]);
        yb(k - b0, 0) = data.y_train(order[static_cast<std::size_t>(k)], 0);
      }
      grad::Tape t;
      const ParamVars pv = register_params(t, spec, res.params);
      MCVIConfig mc = cfg.mc;
      mc.rng_seed = cfg.mc.rng_seed ^ cfg.seed;
      grad::Var elbo = assemble_elbo(t, spec, pv, res.params, cfg.prior, xb, yb, n, cfg.inference, mc, step);
      const double ev = t.scalar_value(elbo);
      grad::Var loss = -elbo;
      grad::GradientMap g = t.backward(loss);
      if (!std::isfinite(ev) || !detail::all_finite(g)) {
        throw NumericalError("non-finite " + std::string(std::isfinite(ev) ? "gradient" : "loss") + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batches) + " (rows " +
                             std::to_string(b0) + "-" + std::to_string(b1 - 1) + "); parameter norms:" +
                             detail::param_norms(blocks));
      }
      adam_step(blocks, g, adam, cfg.learning_rate);
      res.params.from_blocks(spec, blocks);
      elbo_acc += ev / static_cast<double>(n);
      ++batches;
      ++step;
    }
    const bool eval_now = cfg.eval_every <= 1 || (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_elbo = elbo_acc / batches;
    rec.test_ll = eval_now && data.x_test.rows() > 0
                      ? evaluate_test_ll(spec, res.params, data, cfg.inference, cfg.eval_samples, cfg.seed)
                      : std::nan("");
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (eval_now && !std::isfinite(rec.test_ll) && data.x_test.rows() > 0)
      throw NumericalError("non-finite test log-likelihood at epoch " + std::to_string(epoch + 1) +
                           "; parameter norms:" + detail::param_norms(blocks));
    res.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  res.metrics.final_test_ll = res.metrics.epochs.empty() || data.x_test.rows() == 0
                                  ? std::nan("")
                                  : res.metrics.epochs.back().test_ll;
  return res;
}

}  // namespace dvi
