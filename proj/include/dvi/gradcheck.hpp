#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dvi/tape.hpp"

namespace dvi::grad {

using Blocks = std::map<std::string, Mat>;
using VarMap = std::map<std::string, Var>;
using TapeLoss = std::function<Var(Tape&, const VarMap&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_block;
  Eigen::Index worst_index = -1;
  int coordinates = 0;
};

inline double evaluate_loss(const TapeLoss& loss, const Blocks& params, GradientMap* grads = nullptr) {
  Tape t;
  VarMap vars;
  for (const auto& [name, value] : params) vars[name] = t.param(name, value);
  Var root = loss(t, vars);
  const double v = t.scalar_value(root);
  if (grads != nullptr) *grads = t.backward(root);
  return v;
}

// Relative error per coordinate uses max(|g|, |fd|, 1e-8) as denominator.
// Blocks larger than the budget are subsampled with a fixed seed.
inline GradCheckResult finite_diff_check(const TapeLoss& loss, const Blocks& params, double eps = 1e-5,
                                         int max_coords = 200) {
  GradientMap analytic;
  evaluate_loss(loss, params, &analytic);

  std::vector<std::pair<std::string, Eigen::Index>> coords;
  for (const auto& [name, value] : params)
    for (Eigen::Index i = 0; i < value.size(); ++i) coords.emplace_back(name, i);
  if (static_cast<int>(coords.size()) > max_coords) {
    std::mt19937_64 gen(0x5eedULL);
    std::vector<std::size_t> idx(coords.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < static_cast<std::size_t>(max_coords); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(gen() % (idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(max_coords));
    std::sort(idx.begin(), idx.end());
    std::vector<std::pair<std::string, Eigen::Index>> picked;
    for (std::size_t k : idx) picked.push_back(coords[k]);
    coords.swap(picked);
  }

  GradCheckResult res;
  Blocks work = params;
  for (const auto& [name, i] : coords) {
    double& x = work[name].data()[i];
    const double x0 = x;
    x = x0 + eps;
    const double fp = evaluate_loss(loss, work);
    x = x0 - eps;
    const double fm = evaluate_loss(loss, work);
    x = x0;
    const double fd = (fp - fm) / (2.0 * eps);
    const double g = analytic.at(name).data()[i];
    const double err = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8});
    if (err > res.max_rel_error || res.worst_index < 0) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      if (err >= res.max_rel_error) {
        res.worst_block = name;
        res.worst_index = i;
      }
    }
    ++res.coordinates;
  }
  return res;
}

}  // namespace dvi::grad
