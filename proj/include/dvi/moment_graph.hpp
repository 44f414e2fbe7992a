#pragma once

// Batched moment propagation recorded on a gradient tape. Rows are data
// points; full covariances are flattened to B x H^2 (see tape.hpp).

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "dvi/ebprior.hpp"
#include "dvi/gaussmoments.hpp"
#include "dvi/network.hpp"
#include "dvi/tape.hpp"

namespace dvi {

struct LayerVars {
  grad::Var w_mean, w_logvar, b_mean, b_logvar;
};

struct ParamVars {
  std::vector<LayerVars> layers;
  grad::Var log_noise;
};

inline ParamVars register_params(grad::Tape& t, const NetworkSpec& spec, const ModelParams& p) {
  ParamVars v;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const int i = static_cast<int>(l);
    const LayerParams& lp = p.layers[l];
    v.layers.push_back({t.param(ModelParams::block_name(i, "w_mean"), lp.weight_mean),
                        t.param(ModelParams::block_name(i, "w_logvar"), lp.weight_logvar),
                        t.param(ModelParams::block_name(i, "b_mean"), lp.bias_mean.transpose()),
                        t.param(ModelParams::block_name(i, "b_logvar"), lp.bias_logvar.transpose())});
  }
  if (spec.head == Head::kHomoRegression) v.log_noise = t.param("log_noise", Matrix::Constant(1, 1, p.log_noise));
  return v;
}

// cov is B x H^2 in full mode and B x H (variances) in diagonal mode.
struct BatchMoments {
  grad::Var mean;
  grad::Var cov;
  CovMode mode = CovMode::kFull;
  bool uncorrelated = false;  // off-diagonal covariance structurally zero
};

namespace detail {

inline Matrix offdiag_mask(Eigen::Index rows, Eigen::Index h) {
  Matrix m = Matrix::Ones(rows, h * h);
  for (Eigen::Index j = 0; j < h; ++j) m.col(j * h + j).setZero();
  return m;
}

inline grad::Var variances_of(const BatchMoments& a) {
  return a.mode == CovMode::kFull ? grad::diag_part(a.cov) : a.cov;
}

inline grad::Var floor_diagonal(grad::Var cov) {
  grad::Var d = grad::diag_part(cov);
  return cov - grad::diag_embed(d) + grad::diag_embed(grad::clamp(d, kVarianceFloor, 1e300));
}

// Pairwise <h_j h_l> for j != l as one fused tape primitive.
// Inputs: standardized means mu (B x H), standard deviations sd (B x H) and the
// pre-activation covariance (B x H^2). Diagonal entries of the output are zero.
class CrossMomentPrimitive final : public grad::CustomPrimitive {
 public:
  explicit CrossMomentPrimitive(Nonlinearity kind) : kind_(kind) {}
  const char* name() const override { return "cross_second_moments"; }

  grad::Mat forward(const std::vector<const grad::Mat*>& in) const override {
    check(in);
    grad::Mat out = grad::Mat::Zero(in[0]->rows(), in[2]->cols());
    sweep(in, nullptr, nullptr, &out);
    return out;
  }

  void backward(const std::vector<const grad::Mat*>& in, const grad::Mat&, const grad::Mat& g,
                const std::vector<bool>&, std::vector<grad::Mat>& grads) const override {
    grads[0] = grad::Mat::Zero(in[0]->rows(), in[0]->cols());
    grads[1] = grad::Mat::Zero(in[1]->rows(), in[1]->cols());
    grads[2] = grad::Mat::Zero(in[2]->rows(), in[2]->cols());
    sweep(in, &g, &grads, nullptr);
  }

 private:
  struct Entry {
    double d, d_m1, d_m2, d_r;
  };

  static void check(const std::vector<const grad::Mat*>& in) {
    if (in.size() != 3) throw StructuralError("cross_second_moments: expects mu, sd, cov");
    const Eigen::Index h = in[0]->cols();
    if (in[1]->rows() != in[0]->rows() || in[1]->cols() != h || in[2]->rows() != in[0]->rows() ||
        in[2]->cols() != h * h)
      throw StructuralError("cross_second_moments: shape mismatch");
  }

  // Dimensionless moment and its partials at clamped correlation r.
  Entry entry(double m1, double m2, double r, double c1, double c2, double p1, double p2, double s1,
              double s2) const {
    Entry e{};
    if (kind_ == Nonlinearity::kHeaviside) {
      e.d = c1 * c2;
      e.d_m1 = p1 * c2;
      e.d_m2 = c1 * p2;
    } else {
      e.d = s1 * s2 + r * c1 * c2;
      e.d_m1 = c1 * s2 + r * p1 * c2;
      e.d_m2 = s1 * c2 + r * c1 * p2;
      e.d_r = c1 * c2;
    }
    if (std::abs(r) < kRhoCutoff) {
      // correction dropped, but its slope at rho = 0 is phi(m1) phi(m2) for Heaviside
      if (kind_ == Nonlinearity::kHeaviside) e.d_r = p1 * p2;
      return e;
    }
    const double rbar = std::sqrt(1.0 - r * r);
    const double omb = r * r / (1.0 + rbar);  // 1 - rbar
    const double as = std::asin(r);
    double a, a_r, b, b_r, gm, gm_r;
    if (kind_ == Nonlinearity::kHeaviside) {
      a = as;
      a_r = 1.0 / rbar;
      b = r / (2.0 * a * rbar);
      gm = omb / (a * rbar);
      const double common = -a_r / a + r / (rbar * rbar);
      b_r = b * (1.0 / r + common);
      gm_r = gm * ((1.0 + rbar) / (r * rbar) + common);
    } else {
      a = r * as - omb;
      a_r = as;
      b = omb / (2.0 * a);
      gm = (as - r) / a;
      b_r = b * ((1.0 + rbar) / (r * rbar) - a_r / a);
      gm_r = ((omb / rbar) * a - (as - r) * a_r) / (a * a);
    }
    const double q = gm * m1 * m2 - b * (m1 * m1 + m2 * m2);
    const double eq = std::exp(q) * (0.5 / std::numbers::pi);
    const double corr = a * eq;
    e.d += corr;
    e.d_m1 += corr * (gm * m2 - 2.0 * b * m1);
    e.d_m2 += corr * (gm * m1 - 2.0 * b * m2);
    e.d_r += eq * (a_r + a * (gm_r * m1 * m2 - b_r * (m1 * m1 + m2 * m2)));
    return e;
  }

  // One pass over all off-diagonal entries: fills out, or accumulates the
  // vector-Jacobian product of g into grads.
  void sweep(const std::vector<const grad::Mat*>& in, const grad::Mat* g, std::vector<grad::Mat>* grads,
             grad::Mat* out) const {
    const grad::Mat& mu = *in[0];
    const grad::Mat& sd = *in[1];
    const grad::Mat& cov = *in[2];
    const Eigen::Index rows = mu.rows(), h = mu.cols();
    const bool relu = kind_ == Nonlinearity::kReLU;
    std::vector<double> cdf(static_cast<std::size_t>(h)), pdf(cdf.size()), sr(cdf.size());
    for (Eigen::Index b = 0; b < rows; ++b) {
      for (Eigen::Index j = 0; j < h; ++j) {
        const auto k = static_cast<std::size_t>(j);
        cdf[k] = std_normal_cdf(mu(b, j));
        pdf[k] = std_normal_pdf(mu(b, j));
        sr[k] = relu ? soft_relu(mu(b, j)) : 0.0;
      }
      for (Eigen::Index j = 0; j < h; ++j) {
        const auto kj = static_cast<std::size_t>(j);
        for (Eigen::Index l = 0; l < h; ++l) {
          if (l == j) continue;
          const auto kl = static_cast<std::size_t>(l);
          const Eigen::Index col = j * h + l;
          const double scale = sd(b, j) * sd(b, l);
          const double r_raw = cov(b, col) / scale;
          const double r = std::clamp(r_raw, -kRhoClamp, kRhoClamp);
          const Entry e = entry(mu(b, j), mu(b, l), r, cdf[kj], cdf[kl], pdf[kj], pdf[kl], sr[kj], sr[kl]);
          if (out != nullptr) {
            (*out)(b, col) = relu ? scale * e.d : e.d;
            continue;
          }
          const double gv = (*g)(b, col);
          if (gv == 0.0) continue;
          const double inside = (r_raw >= -kRhoClamp && r_raw <= kRhoClamp) ? 1.0 : 0.0;
          const double dr_dc = inside / scale;
          const double f = relu ? scale : 1.0;
          (*grads)[0](b, j) += gv * f * e.d_m1;
          (*grads)[0](b, l) += gv * f * e.d_m2;
          (*grads)[2](b, col) += gv * f * e.d_r * dr_dc;
          // r depends on sd through r = c / (sd_j sd_l)
          const double via_r = f * e.d_r * inside * r;
          (*grads)[1](b, j) += gv * ((relu ? sd(b, l) * e.d : 0.0) - via_r / sd(b, j));
          (*grads)[1](b, l) += gv * ((relu ? sd(b, j) * e.d : 0.0) - via_r / sd(b, l));
        }
      }
    }
  }

  Nonlinearity kind_;
};

inline grad::Var cross_second_moments(grad::Tape&, grad::Var mu, grad::Var sd, grad::Var cov, Nonlinearity kind) {
  return grad::custom(std::make_shared<const CrossMomentPrimitive>(kind), {mu, sd, cov});
}

// Means <f(a)>, second moments <f(a)^2>, and E[f'(a)] for a ~ N(mean, var).
struct NonlinMoments {
  grad::Var mean, sq, mu, sd, slope;
};

inline NonlinMoments nonlin_moments(grad::Var mean, grad::Var var, Nonlinearity kind) {
  using namespace grad;
  NonlinMoments r;
  r.sd = sqrt(var);
  r.mu = mean / r.sd;
  Var cdf = norm_cdf(r.mu);
  if (kind == Nonlinearity::kHeaviside) {
    r.mean = cdf;
    r.sq = cdf;
    r.slope = norm_pdf(r.mu) / r.sd;
  } else {
    r.mean = r.sd * soft_relu(r.mu);
    r.sq = var * (r.mu * norm_pdf(r.mu) + (1.0 + square(r.mu)) * cdf);
    r.slope = cdf;
  }
  return r;
}

}  // namespace detail

// First linear layer applied to deterministic inputs x (B x d).
inline BatchMoments propagate_input_batch(grad::Tape& t, const LayerVars& lv, const Matrix& x, CovMode mode) {
  using namespace grad;
  Var xv = t.constant(x);
  Var x2 = t.constant(x.array().square().matrix());
  BatchMoments out;
  out.mode = mode;
  out.mean = matmul(xv, lv.w_mean) + lv.b_mean;
  Var var = clamp(matmul(x2, exp(lv.w_logvar)) + exp(lv.b_logvar), kVarianceFloor, 1e300);
  out.cov = mode == CovMode::kFull ? diag_embed(var) : var;
  out.uncorrelated = true;
  return out;
}

inline BatchMoments propagate_layer_batch(grad::Tape& t, const BatchMoments& in, const LayerVars& lv, Nonlinearity kind,
                                          bool skip) {
  using namespace grad;
  const Eigen::Index rows = t.value(in.mean).rows();
  const Eigen::Index h = t.value(in.mean).cols();
  Var var = detail::variances_of(in);
  detail::NonlinMoments nm = detail::nonlin_moments(in.mean, var, kind);

  BatchMoments out;
  out.mode = in.mode;
  Var w_var = exp(lv.w_logvar);
  Var b_var = exp(lv.b_logvar);
  out.mean = matmul(nm.mean, lv.w_mean) + lv.b_mean;
  Var diag_terms = matmul(nm.sq, w_var) + b_var;
  if (in.mode == CovMode::kFull) {
    Var h_cov;
    if (in.uncorrelated) {
      // rho = 0 everywhere, so the pairwise moment is exactly the product of means
      h_cov = diag_embed(nm.sq - square(nm.mean));
    } else {
      Var second = detail::cross_second_moments(t, nm.mu, nm.sd, in.cov, kind);
      h_cov = t.constant(detail::offdiag_mask(rows, h)) * second + diag_embed(nm.sq) -
              expand_row(nm.mean) * expand_col(nm.mean);
    }
    out.cov = congruence(h_cov, lv.w_mean) + diag_embed(diag_terms);
    if (skip) {
      // Cov(a'_i, delta_k) = sum_j Sigma'_ij E[f'(a'_j)] W_jk
      Var cross = batched_matmul(in.cov * expand_col(nm.slope), lv.w_mean);
      out.mean = out.mean + in.mean;
      out.cov = out.cov + in.cov + cross + batched_transpose(cross);
    }
    out.cov = detail::floor_diagonal(out.cov);
  } else {
    if (skip) throw StructuralError("skip connections need full covariance");
    Var h_var = nm.sq - square(nm.mean);
    out.cov = clamp(matmul(h_var, square(lv.w_mean)) + diag_terms, kVarianceFloor, 1e300);
  }
  return out;
}

inline BatchMoments dvi_forward_batch(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const Matrix& x) {
  BatchMoments act = propagate_input_batch(t, pv.layers.front(), x, spec.cov_mode);
  for (int l = 1; l < spec.num_layers(); ++l) {
    act = propagate_layer_batch(t, act, pv.layers[static_cast<std::size_t>(l)], spec.nonlinearity,
                                spec.skip_layers.count(l) != 0);
  }
  return act;
}

// Regression head moments as B x 1 columns.
struct RegressionColumns {
  grad::Var m, l, s_mm, s_ll, s_ml;
};

inline RegressionColumns regression_columns(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv,
                                            const BatchMoments& out) {
  using namespace grad;
  RegressionColumns c;
  const Eigen::Index rows = t.value(out.mean).rows();
  c.m = select_cols(out.mean, {0});
  if (spec.head == Head::kHomoRegression) {
    c.s_mm = out.mode == CovMode::kFull ? select_cols(out.cov, {0}) : out.cov;
    c.l = pv.log_noise;
    c.s_ll = t.constant(Matrix::Zero(rows, 1));
    c.s_ml = t.constant(Matrix::Zero(rows, 1));
    return c;
  }
  c.l = select_cols(out.mean, {1});
  if (out.mode == CovMode::kFull) {
    c.s_mm = select_cols(out.cov, {0});
    c.s_ll = select_cols(out.cov, {3});
    c.s_ml = select_cols(out.cov, {1});
  } else {
    c.s_mm = select_cols(out.cov, {0});
    c.s_ll = select_cols(out.cov, {1});
    c.s_ml = t.constant(Matrix::Zero(rows, 1));
  }
  return c;
}

// Sum over the batch of the closed-form expected log-likelihood.
inline grad::Var regression_ell_sum(grad::Tape& t, const RegressionColumns& c, const Matrix& y) {
  using namespace grad;
  Var yv = t.constant(y);
  Var r = c.m - c.s_ml - yv;
  Var quad = (c.s_mm + square(r)) * exp(0.5 * c.s_ll - c.l);
  Var per = -0.5 * (c.l + quad + kLog2Pi);
  return sum(per);
}

inline grad::Var dvi_reconstruction(grad::Tape& t, const NetworkSpec& spec, const ParamVars& pv, const Matrix& x,
                                    const Matrix& y) {
  if (spec.head == Head::kClassification) throw StructuralError("training supports regression heads only");
  BatchMoments out = dvi_forward_batch(t, spec, pv, x);
  return regression_ell_sum(t, regression_columns(t, spec, pv, out), y);
}

// KL(q || N(0, s I)) for one block; s is a constant.
inline grad::Var kl_block(grad::Tape& t, grad::Var mean, grad::Var logvar, double s) {
  using namespace grad;
  const double d = static_cast<double>(t.value(mean).size());
  Var tr = sum(exp(logvar) + square(mean));
  return 0.5 * (tr / s - sum(logvar)) + t.scalar(0.5 * d * (std::log(s) - 1.0));
}

// Weight blocks use per-layer prior variances; biases a fixed unit-variance prior.
inline grad::Var kl_total(grad::Tape& t, const ParamVars& pv, const std::vector<double>& weight_prior_var) {
  grad::Var total = t.scalar(0.0);
  for (std::size_t l = 0; l < pv.layers.size(); ++l) {
    total = total + kl_block(t, pv.layers[l].w_mean, pv.layers[l].w_logvar, weight_prior_var.at(l));
    total = total + kl_block(t, pv.layers[l].b_mean, pv.layers[l].b_logvar, 1.0);
  }
  return total;
}

}  // namespace dvi
