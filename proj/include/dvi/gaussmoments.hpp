#pragma once

// Closed-form Gaussian moment propagation through factorized-Gaussian linear
// layers and Heaviside / ReLU nonlinearities, one datum at a time.
//
// The batched, differentiable counterpart used for training lives in
// moment_graph.hpp; this header is the reference path and is what the
// verification tools and tests compare against brute-force oracles.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dvi/errors.hpp"
#include "dvi/specials.hpp"

namespace dvi {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Nonlinearity { kHeaviside, kReLU };
enum class CovMode { kFull, kDiagonal };

inline constexpr double kRhoClamp = 1.0 - 1e-6;
inline constexpr double kRhoCutoff = 1e-8;
inline constexpr double kVarianceFloor = 1e-12;

// Mean and covariance of a layer's pre-activations. In diagonal mode the
// off-diagonal entries of cov are kept at zero.
struct GaussianActivation {
  Vector mean;
  Matrix cov;
  CovMode mode = CovMode::kFull;

  Eigen::Index dim() const { return mean.size(); }
};

// Factorized Gaussian over one layer's weights (fan_in x fan_out) and biases.
struct LayerParams {
  Matrix weight_mean;
  Matrix weight_logvar;
  Vector bias_mean;
  Vector bias_logvar;

  Eigen::Index fan_in() const { return weight_mean.rows(); }
  Eigen::Index fan_out() const { return weight_mean.cols(); }
  Matrix weight_var() const { return weight_logvar.array().exp().matrix(); }
  Vector bias_var() const { return bias_logvar.array().exp().matrix(); }

  void validate() const {
    if (weight_logvar.rows() != weight_mean.rows() || weight_logvar.cols() != weight_mean.cols() ||
        bias_mean.size() != weight_mean.cols() || bias_logvar.size() != weight_mean.cols()) {
      throw StructuralError("LayerParams: inconsistent block shapes");
    }
  }
};

struct BivariateStats {
  double mu1 = 0.0;
  double mu2 = 0.0;
  double rho = 0.0;
  double rho_bar = 1.0;
  double scale = 1.0;
};

// Residual fit c(mu1, mu2) = alpha / (2 pi) * exp(-beta (mu1^2 + mu2^2) + gamma mu1 mu2).
struct CorrectionCoeffs {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  Nonlinearity nonlinearity = Nonlinearity::kReLU;
};

inline double nonlin_apply(double x, Nonlinearity kind) {
  return kind == Nonlinearity::kReLU ? std::max(x, 0.0) : (x > 0.0 ? 1.0 : 0.0);
}

inline double nonlin_mean(double mu, double sigma2, Nonlinearity kind) {
  if (sigma2 < 0.0) throw std::domain_error("nonlin_mean: negative variance");
  if (sigma2 == 0.0) return nonlin_apply(mu, kind);
  const double sd = std::sqrt(sigma2);
  const double z = mu / sd;
  return kind == Nonlinearity::kHeaviside ? std_normal_cdf(z) : sd * soft_relu(z);
}

inline double nonlin_sq_mean(double mu, double sigma2, Nonlinearity kind) {
  if (sigma2 < 0.0) throw std::domain_error("nonlin_sq_mean: negative variance");
  if (sigma2 == 0.0) {
    const double f = nonlin_apply(mu, kind);
    return f * f;
  }
  const double z = mu / std::sqrt(sigma2);
  if (kind == Nonlinearity::kHeaviside) return std_normal_cdf(z);
  return sigma2 * relu_sq_unit(z);
}

// Large-|mu| asymptote of the dimensionless cross moment.
inline double cross_moment_asymptote(double mu1, double mu2, double rho, Nonlinearity kind) {
  if (kind == Nonlinearity::kHeaviside) return std_normal_cdf(mu1) * std_normal_cdf(mu2);
  return soft_relu(mu1) * soft_relu(mu2) + rho * std_normal_cdf(mu1) * std_normal_cdf(mu2);
}

// Coefficients matched to the exact residual I - A at the origin: its value,
// vanishing gradient, and Hessian. For Heaviside alpha is odd in rho; for ReLU
// the residual at the origin is even in rho and non-negative, so alpha is too.
inline CorrectionCoeffs match_correction_coeffs(double rho, Nonlinearity kind) {
  if (!(std::abs(rho) < 1.0)) throw std::domain_error("match_correction_coeffs: |rho| must be < 1");
  CorrectionCoeffs c;
  c.nonlinearity = kind;
  if (rho == 0.0) return c;
  const double rho_bar = std::sqrt(1.0 - rho * rho);
  const double one_minus_rho_bar = rho * rho / (1.0 + rho_bar);
  const double as = std::asin(rho);
  if (kind == Nonlinearity::kHeaviside) {
    c.alpha = as;
    c.beta = rho / (2.0 * c.alpha * rho_bar);
    c.gamma = one_minus_rho_bar / (c.alpha * rho_bar);
  } else {
    c.alpha = rho * as - one_minus_rho_bar;
    c.beta = one_minus_rho_bar / (2.0 * c.alpha);
    c.gamma = (as - rho) / c.alpha;
  }
  return c;
}

inline double correction_term(double mu1, double mu2, const CorrectionCoeffs& c) {
  const double q = -c.beta * (mu1 * mu1 + mu2 * mu2) + c.gamma * mu1 * mu2;
  return c.alpha / (2.0 * std::numbers::pi) * std::exp(q);
}

// E[f(eta1) f(eta2)] for unit-variance correlated Gaussians with means mu1, mu2.
inline double cross_moment_dimensionless(const BivariateStats& b, Nonlinearity kind) {
  const double rho = std::clamp(b.rho, -kRhoClamp, kRhoClamp);
  const double a = cross_moment_asymptote(b.mu1, b.mu2, rho, kind);
  if (std::abs(rho) < kRhoCutoff) return a;
  return a + correction_term(b.mu1, b.mu2, match_correction_coeffs(rho, kind));
}

inline BivariateStats make_bivariate(double mean_j, double mean_l, double var_j, double var_l, double cov_jl) {
  BivariateStats b;
  const double sj = std::sqrt(var_j), sl = std::sqrt(var_l);
  b.mu1 = mean_j / sj;
  b.mu2 = mean_l / sl;
  b.scale = sj * sl;
  b.rho = std::clamp(cov_jl / b.scale, -1.0, 1.0);
  b.rho_bar = std::sqrt(1.0 - b.rho * b.rho);
  return b;
}

namespace detail {

inline void check_activation(const GaussianActivation& act) {
  if (act.cov.rows() != act.mean.size() || act.cov.cols() != act.mean.size()) {
    throw StructuralError("GaussianActivation: covariance shape does not match mean");
  }
}

// Second moments <h_j h_l> and means <h_j> of h = f(a) under a ~ N(act).
inline void nonlin_moments(const GaussianActivation& act, Nonlinearity kind, Vector& h_mean, Matrix& h_second) {
  const Eigen::Index d = act.dim();
  h_mean.resize(d);
  h_second.setZero(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double v = std::max(act.cov(j, j), 0.0);
    h_mean(j) = nonlin_mean(act.mean(j), v, kind);
    h_second(j, j) = nonlin_sq_mean(act.mean(j), v, kind);
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index l = j + 1; l < d; ++l) {
      double m = h_mean(j) * h_mean(l);
      const double vj = act.cov(j, j), vl = act.cov(l, l);
      if (act.mode == CovMode::kFull && vj > 0.0 && vl > 0.0) {
        const BivariateStats b = make_bivariate(act.mean(j), act.mean(l), vj, vl, act.cov(j, l));
        const double s = kind == Nonlinearity::kReLU ? b.scale : 1.0;
        m = s * cross_moment_dimensionless(b, kind);
      }
      h_second(j, l) = m;
      h_second(l, j) = m;
    }
  }
}

inline void apply_variance_floor(Matrix& cov) {
  for (Eigen::Index i = 0; i < cov.rows(); ++i) cov(i, i) = std::max(cov(i, i), kVarianceFloor);
}

}  // namespace detail

// h_cov is a full matrix; in diagonal mode only its diagonal is used.
inline GaussianActivation propagate_linear(const Vector& h_mean, const Vector& h_sq_diag, const Matrix& h_cov,
                                           const LayerParams& layer, CovMode mode) {
  layer.validate();
  const Eigen::Index h = layer.fan_in();
  if (h_mean.size() != h || h_sq_diag.size() != h || h_cov.rows() != h || h_cov.cols() != h) {
    throw StructuralError("propagate_linear: input width " + std::to_string(h_mean.size()) +
                          " does not match layer fan-in " + std::to_string(h));
  }
  GaussianActivation out;
  out.mode = mode;
  out.mean = layer.weight_mean.transpose() * h_mean + layer.bias_mean;
  const Matrix& w = layer.weight_mean;
  if (mode == CovMode::kFull) {
    out.cov = w.transpose() * h_cov * w;
  } else {
    const Vector hv = h_cov.diagonal();
    out.cov = Matrix::Zero(w.cols(), w.cols());
    out.cov.diagonal() = w.array().square().matrix().transpose() * hv;
  }
  out.cov.diagonal() += layer.weight_var().transpose() * h_sq_diag + layer.bias_var();
  return out;
}

inline GaussianActivation propagate_layer(const GaussianActivation& act, Nonlinearity kind, const LayerParams& layer,
                                          CovMode mode) {
  detail::check_activation(act);
  GaussianActivation in = act;
  in.mode = mode;
  Vector hm;
  Matrix second;
  detail::nonlin_moments(in, kind, hm, second);
  Matrix hcov = second - hm * hm.transpose();
  if (mode == CovMode::kDiagonal) hcov = Matrix(hcov.diagonal().asDiagonal());
  GaussianActivation out = propagate_linear(hm, second.diagonal(), hcov, layer, mode);
  detail::apply_variance_floor(out.cov);
  return out;
}

// Residual block a = a' + f(a') W + b on a square layer.
inline GaussianActivation propagate_skip(const GaussianActivation& act, Nonlinearity kind, const LayerParams& layer) {
  detail::check_activation(act);
  layer.validate();
  if (layer.fan_in() != layer.fan_out()) throw StructuralError("propagate_skip: layer must be square");
  if (layer.fan_in() != act.dim()) throw StructuralError("propagate_skip: width mismatch");
  GaussianActivation in = act;
  in.mode = CovMode::kFull;
  Vector hm;
  Matrix second;
  detail::nonlin_moments(in, kind, hm, second);
  const Matrix hcov = second - hm * hm.transpose();
  GaussianActivation delta = propagate_linear(hm, second.diagonal(), hcov, layer, CovMode::kFull);

  // Cov(a'_i, f(a'_j)) = Sigma'_ij E[f'(a'_j)]
  const Eigen::Index d = act.dim();
  Vector g(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double v = act.cov(j, j);
    if (v <= 0.0) {
      g(j) = 0.0;
      continue;
    }
    const double z = act.mean(j) / std::sqrt(v);
    g(j) = kind == Nonlinearity::kReLU ? std_normal_cdf(z) : std_normal_pdf(z) / std::sqrt(v);
  }
  const Matrix cross = act.cov * g.asDiagonal() * layer.weight_mean;

  GaussianActivation out;
  out.mode = CovMode::kFull;
  out.mean = act.mean + delta.mean;
  out.cov = act.cov + delta.cov + cross + cross.transpose();
  detail::apply_variance_floor(out.cov);
  return out;
}

// Deterministic input x through the first linear layer.
inline GaussianActivation propagate_input(const Vector& x, const LayerParams& layer, CovMode mode) {
  const Matrix zero = Matrix::Zero(x.size(), x.size());
  GaussianActivation out = propagate_linear(x, x.array().square().matrix(), zero, layer, mode);
  detail::apply_variance_floor(out.cov);
  return out;
}

}  // namespace dvi
