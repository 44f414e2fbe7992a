#pragma once

// Monte Carlo variational inference: reparameterized weight sampling and the
// local reparameterization variant, plus a gradient-variance probe.

#include <cstdint>
#include <vector>

#include "dvi/moment_graph.hpp"
#include "dvi/network.hpp"
#include "dvi/rng.hpp"
#include "dvi/tape.hpp"

namespace dvi {

enum class McMode { kWeightSampling, kLocalReparam };

struct MCVIConfig {
  int samples = 10;
  std::uint64_t rng_seed = 0;
  McMode mode = McMode::kWeightSampling;
};

namespace detail {

inline grad::Var apply_nonlin(grad::Var a, Nonlinearity kind) {
  return kind == Nonlinearity::kReLU ? grad::relu(a) : grad::heaviside(a);
}

// Sum over the batch of log N(y | m, e^l) for one forward sample.
inline grad::Var sample_log_lik(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, grad::Var out,
                                const Matrix& y) {
  using namespace grad;
  Var m = select_cols(out, {0});
  Var l = spec.head == Head::kHomoRegression ? pv.log_noise : select_cols(out, {1});
  Var r = m - t.constant(y);
  return sum(-0.5 * (l + square(r) * exp(-l) + kLog2Pi));
}

}  // namespace detail

// One sampled forward pass; sample index and step select the noise streams.
inline grad::Var mc_forward_sample(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const Matrix& x,
                                   const MCVIConfig& cfg, std::uint64_t step, std::uint64_t sample) {
  using namespace grad;
  const Eigen::Index rows = x.rows();
  Var a;
  Var h = t.constant(x);
  for (int l = 0; l < spec.num_layers(); ++l) {
    const LayerVars& lv = pv.layers[static_cast<std::size_t>(l)];
    const Eigen::Index fin = t.value(lv.w_mean).rows(), fout = t.value(lv.w_mean).cols();
    if (l > 0) h = detail::apply_nonlin(a, spec.nonlinearity);
    Var next;
    if (cfg.mode == McMode::kWeightSampling) {
      KeyedStream ws(cfg.rng_seed, step, sample, static_cast<std::uint64_t>(2 * l));
      KeyedStream bs(cfg.rng_seed, step, sample, static_cast<std::uint64_t>(2 * l + 1));
      Var w = lv.w_mean + exp(0.5 * lv.w_logvar) * t.constant(ws.normal_matrix(fin, fout));
      Var b = lv.b_mean + exp(0.5 * lv.b_logvar) * t.constant(bs.normal_matrix(1, fout));
      next = matmul(h, w) + b;
    } else {
      KeyedStream as(cfg.rng_seed, step, sample, static_cast<std::uint64_t>(2 * l));
      Var mean = matmul(h, lv.w_mean) + lv.b_mean;
      Var var = matmul(square(h), exp(lv.w_logvar)) + exp(lv.b_logvar);
      next = mean + sqrt(var) * t.constant(as.normal_matrix(rows, fout));
    }
    if (l > 0 && spec.skip_layers.count(l) != 0) next = next + a;
    a = next;
  }
  return a;
}

// (1/S) sum_s sum_n log p(y_n | x_n, w^(s)).
inline grad::Var mc_reconstruction(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const Matrix& x,
                                   const Matrix& y, const MCVIConfig& cfg, std::uint64_t step) {
  if (spec.head == Head::kClassification) throw StructuralError("training supports regression heads only");
  if (cfg.samples < 1) throw StructuralError("MCVI needs at least one sample");
  grad::Var total = t.scalar(0.0);
  for (int s = 0; s < cfg.samples; ++s) {
    grad::Var out = mc_forward_sample(t, spec, pv, x, cfg, step, static_cast<std::uint64_t>(s));
    total = total + detail::sample_log_lik(t, spec, pv, out, y);
  }
  return total * (1.0 / cfg.samples);
}

inline grad::Var local_reparam_forward(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const Matrix& x,
                                       const Matrix& y, MCVIConfig cfg, std::uint64_t step) {
  cfg.mode = McMode::kLocalReparam;
  return mc_reconstruction(t, spec, pv, x, y, cfg, step);
}

enum class ProbeMethod { kDVI, kMCVI };

// Mean over the final-layer weight log-variance coordinates of the
// across-repeat variance of d(reconstruction)/d(logvar).
inline double grad_variance_probe(const NetworkSpec& spec, const ModelParams& p, const Matrix& x, const Matrix& y,
                                  ProbeMethod method, const MCVIConfig& cfg, int repeats) {
  if (repeats < 2) throw StructuralError("grad_variance_probe: need at least two repeats");
  const std::string key = ModelParams::block_name(spec.num_layers() - 1, "w_logvar");
  std::vector<Matrix> grads;
  for (int r = 0; r < repeats; ++r) {
    grad::Tape t;
    ParamVars pv = register_params(t, spec, p);
    grad::Var rec = method == ProbeMethod::kDVI
                        ? dvi_reconstruction(t, spec, pv, x, y)
                        : mc_reconstruction(t, spec, pv, x, y, cfg, static_cast<std::uint64_t>(r));
    grads.push_back(t.backward(rec).at(key));
  }
  // shifted two-pass variance; identical repeats give exactly zero
  const Matrix& ref = grads.front();
  Matrix s1 = Matrix::Zero(ref.rows(), ref.cols()), s2 = s1;
  for (const Matrix& g : grads) {
    Matrix d = g - ref;
    s1 += d;
    s2 += d.cwiseProduct(d);
  }
  const double n = static_cast<double>(repeats);
  Matrix var = (s2 - s1.cwiseProduct(s1) / n) / (n - 1.0);
  return var.mean();
}

}  // namespace dvi
