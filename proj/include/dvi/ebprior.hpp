#pragma once

// KL divergence between factorized Gaussians and the empirical-Bayes
// plug-in update of per-partition prior variances under an inverse-gamma
// hyperprior.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvi/errors.hpp"
#include "dvi/gaussmoments.hpp"

namespace dvi {

inline double kl_diag_gaussian(const Vector& q_mean, const Vector& q_var, const Vector& p_mean, const Vector& p_var) {
  const Eigen::Index d = q_mean.size();
  if (q_var.size() != d || p_mean.size() != d || p_var.size() != d)
    throw StructuralError("kl_diag_gaussian: length mismatch");
  if ((q_var.array() <= 0.0).any() || (p_var.array() <= 0.0).any())
    throw std::domain_error("kl_diag_gaussian: variances must be positive");
  const double log_ratio = (p_var.array() / q_var.array()).log().sum();
  const double trace = (q_var.array() / p_var.array()).sum();
  const double maha = ((p_mean - q_mean).array().square() / p_var.array()).sum();
  return 0.5 * (log_ratio - static_cast<double>(d) + trace + maha);
}

// KL(q || N(0, s I)) written in terms of q's log-variances.
inline double kl_to_isotropic(const Vector& q_mean, const Vector& q_logvar, double s) {
  const double d = static_cast<double>(q_mean.size());
  const double t = (q_logvar.array().exp() + q_mean.array().square()).sum();
  return 0.5 * (d * std::log(s) - q_logvar.sum() - d + t / s);
}

inline double eb_optimal_s(double trace_stat, double omega, double alpha, double beta) {
  return (trace_stat + 2.0 * beta) / (omega + 2.0 * alpha + 2.0);
}

inline double log_inverse_gamma(double s, double alpha, double beta) {
  return alpha * std::log(beta) - std::lgamma(alpha) - (alpha + 1.0) * std::log(s) - beta / s;
}

inline double eb_objective(double s, const Vector& q_mean, const Vector& q_var, double alpha, double beta) {
  if (!(s > 0.0)) throw std::domain_error("eb_objective: s must be positive");
  const Eigen::Index d = q_mean.size();
  return kl_diag_gaussian(q_mean, q_var, Vector::Zero(d), Vector::Constant(d, s)) - log_inverse_gamma(s, alpha, beta);
}

struct PartitionState {
  std::vector<int> members;  // layer indices whose weight matrices share s
  double alpha = 1.0;
  double beta = 10.0;
  long omega = 0;
  double s_star = 1.0;
};

struct HierarchicalPrior {
  std::vector<PartitionState> partitions;
};

// One partition per weight matrix.
inline HierarchicalPrior make_layerwise_prior(const std::vector<LayerParams>& layers, double alpha, double beta) {
  HierarchicalPrior prior;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    PartitionState ps;
    ps.members = {static_cast<int>(l)};
    ps.alpha = alpha;
    ps.beta = beta;
    ps.omega = static_cast<long>(layers[l].weight_mean.size());
    ps.s_star = beta / (alpha + 1.0);
    prior.partitions.push_back(ps);
  }
  return prior;
}

inline double partition_trace(const PartitionState& ps, const std::vector<LayerParams>& layers) {
  double t = 0.0;
  long count = 0;
  for (int m : ps.members) {
    if (m < 0 || static_cast<std::size_t>(m) >= layers.size())
      throw StructuralError("eb_update: partition references missing layer " + std::to_string(m));
    const LayerParams& lp = layers[static_cast<std::size_t>(m)];
    t += (lp.weight_logvar.array().exp() + lp.weight_mean.array().square()).sum();
    count += static_cast<long>(lp.weight_mean.size());
  }
  if (count != ps.omega) throw StructuralError("eb_update: partition size does not match its members");
  return t;
}

inline HierarchicalPrior eb_update(const HierarchicalPrior& prior, const std::vector<LayerParams>& layers) {
  HierarchicalPrior out = prior;
  for (PartitionState& ps : out.partitions) {
    const double t = partition_trace(ps, layers);
    ps.s_star = eb_optimal_s(t, static_cast<double>(ps.omega), ps.alpha, ps.beta);
  }
  return out;
}

}  // namespace dvi
