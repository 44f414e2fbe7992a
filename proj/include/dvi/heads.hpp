#pragma once

// Expected log-likelihoods and predictive distributions computed from the
// Gaussian moments of the final layer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <span>
#include <utility>

#include "dvi/gaussmoments.hpp"
#include "dvi/specials.hpp"

namespace dvi {

// Final activations (m, l): predictive mean and log-variance.
struct RegressionOutputMoments {
  double m_mean = 0.0;
  double l_mean = 0.0;
  double s_mm = 0.0;
  double s_ll = 0.0;
  double s_ml = 0.0;

  static RegressionOutputMoments from_activation(const GaussianActivation& a) {
    return {a.mean(0), a.mean(1), a.cov(0, 0), a.cov(1, 1), a.cov(0, 1)};
  }
};

struct ClassOutputMoments {
  Vector logit_mean;
  Matrix logit_cov;
};

inline double regression_ell(const RegressionOutputMoments& mom, double y) {
  const double r = mom.m_mean - mom.s_ml - y;
  return -0.5 * (kLog2Pi + mom.l_mean + (mom.s_mm + r * r) / std::exp(mom.l_mean - 0.5 * mom.s_ll));
}

inline double regression_ell_homoscedastic(double m_mean, double s_mm, double log_noise_var, double y) {
  return regression_ell({m_mean, log_noise_var, s_mm, 0.0, 0.0}, y);
}

inline std::pair<double, double> predictive_regression(const RegressionOutputMoments& mom) {
  return {mom.m_mean, mom.s_mm + std::exp(mom.l_mean + 0.5 * mom.s_ll)};
}

inline double gaussian_log_density(double y, double mean, double var) {
  const double r = y - mean;
  return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

namespace detail {

inline Vector softmax(const Vector& a) {
  const double m = a.maxCoeff();
  Vector e = (a.array() - m).exp().matrix();
  return e / e.sum();
}

}  // namespace detail

inline double classification_ell(const ClassOutputMoments& mom, Eigen::Index label) {
  const Eigen::Index k = mom.logit_mean.size();
  if (label < 0 || label >= k) throw std::domain_error("classification_ell: label out of range");
  const Vector& a = mom.logit_mean;
  const double lse = log_sum_exp(std::span<const double>(a.data(), static_cast<std::size_t>(k)));
  const Vector p = detail::softmax(a);
  const double correction = p.dot(mom.logit_cov.diagonal()) - p.dot(mom.logit_cov * p);
  return a(label) - lse - 0.5 * correction;
}

// Second-order expansion of E[softmax(a)], clamped and renormalized.
inline Vector classification_predictive(const ClassOutputMoments& mom) {
  const Vector p = detail::softmax(mom.logit_mean);
  const Matrix& s = mom.logit_cov;
  const Vector sp = s * p;
  const Vector d = s.diagonal();
  const double pSp = p.dot(sp);
  const double pd = p.dot(d);
  Vector out = p.array() * (1.0 + pSp - sp.array() + 0.5 * d.array() - 0.5 * pd);
  out = out.cwiseMax(1e-12);
  return out / out.sum();
}

}  // namespace dvi
