#pragma once

// Feed-forward network description, its variational parameters, and the
// reference (per-datum) moment forward pass.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dvi/errors.hpp"
#include "dvi/gaussmoments.hpp"

namespace dvi {

enum class Head { kHeteroRegression, kHomoRegression, kClassification };

struct NetworkSpec {
  std::vector<int> layer_sizes;  // input width, hidden widths, output width
  Nonlinearity nonlinearity = Nonlinearity::kReLU;
  Head head = Head::kHeteroRegression;
  CovMode cov_mode = CovMode::kFull;
  std::set<int> skip_layers;  // indices of linear layers (>= 1) with a residual connection

  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  void validate() const {
    if (layer_sizes.size() < 2) throw StructuralError("network: need at least input and output widths");
    for (int s : layer_sizes)
      if (s <= 0) throw StructuralError("network: layer widths must be positive");
    const int out = layer_sizes.back();
    if (head == Head::kHeteroRegression && out != 2)
      throw StructuralError("network: heteroscedastic regression needs output width 2");
    if (head == Head::kHomoRegression && out != 1)
      throw StructuralError("network: homoscedastic regression needs output width 1");
    for (int l : skip_layers) {
      if (l < 1 || l >= num_layers()) throw StructuralError("network: skip layer index out of range");
      if (layer_sizes[static_cast<std::size_t>(l)] != layer_sizes[static_cast<std::size_t>(l) + 1])
        throw StructuralError("network: skip layer " + std::to_string(l) + " is not square");
      if (cov_mode != CovMode::kFull) throw StructuralError("network: skip layers need full covariance");
    }
  }
};

struct ModelParams {
  std::vector<LayerParams> layers;
  double log_noise = 0.0;  // homoscedastic head only

  static std::string block_name(int layer, const char* what) { return "L" + std::to_string(layer) + "." + what; }

  std::map<std::string, Matrix> to_blocks(const NetworkSpec& spec) const {
    std::map<std::string, Matrix> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const int i = static_cast<int>(l);
      out[block_name(i, "w_mean")] = layers[l].weight_mean;
      out[block_name(i, "w_logvar")] = layers[l].weight_logvar;
      out[block_name(i, "b_mean")] = layers[l].bias_mean.transpose();
      out[block_name(i, "b_logvar")] = layers[l].bias_logvar.transpose();
    }
    if (spec.head == Head::kHomoRegression) out["log_noise"] = Matrix::Constant(1, 1, log_noise);
    return out;
  }

  void from_blocks(const NetworkSpec& spec, const std::map<std::string, Matrix>& blocks) {
    auto get = [&](const std::string& k) -> const Matrix& {
      auto it = blocks.find(k);
      if (it == blocks.end()) throw StructuralError("missing parameter block " + k);
      return it->second;
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const int i = static_cast<int>(l);
      layers[l].weight_mean = get(block_name(i, "w_mean"));
      layers[l].weight_logvar = get(block_name(i, "w_logvar"));
      layers[l].bias_mean = get(block_name(i, "b_mean")).transpose();
      layers[l].bias_logvar = get(block_name(i, "b_logvar")).transpose();
      layers[l].validate();
    }
    if (spec.head == Head::kHomoRegression) log_noise = get("log_noise")(0, 0);
  }
};

// He-style means, small initial weight variance, zero bias means.
inline ModelParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelParams p;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int fin = spec.layer_sizes[static_cast<std::size_t>(l)];
    const int fout = spec.layer_sizes[static_cast<std::size_t>(l) + 1];
    const double var = 2.0 / fin;
    LayerParams lp;
    lp.weight_mean = Matrix(fin, fout);
    for (Eigen::Index i = 0; i < lp.weight_mean.size(); ++i) lp.weight_mean.data()[i] = std::sqrt(var) * normal(gen);
    lp.weight_logvar = Matrix::Constant(fin, fout, std::log(1e-3 * var));
    lp.bias_mean = Vector::Zero(fout);
    lp.bias_logvar = Vector::Constant(fout, std::log(1e-3));
    p.layers.push_back(std::move(lp));
  }
  return p;
}

// Output pre-activation moments for a single input row.
inline GaussianActivation dvi_forward(const NetworkSpec& spec, const ModelParams& p, const Vector& x) {
  GaussianActivation act = propagate_input(x, p.layers.front(), spec.cov_mode);
  for (int l = 1; l < spec.num_layers(); ++l) {
    const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
    act = spec.skip_layers.count(l) != 0 ? propagate_skip(act, spec.nonlinearity, lp)
                                          : propagate_layer(act, spec.nonlinearity, lp, spec.cov_mode);
  }
  return act;
}

// Plain forward pass with fixed weights (one draw from q).
struct SampledLayer {
  Matrix weight;
  Vector bias;
};

inline Vector deterministic_forward(const NetworkSpec& spec, const std::vector<SampledLayer>& layers, const Vector& x) {
  Vector a = layers.front().weight.transpose() * x + layers.front().bias;
  for (int l = 1; l < spec.num_layers(); ++l) {
    const SampledLayer& sl = layers[static_cast<std::size_t>(l)];
    Vector h = a.unaryExpr([&](double t) { return nonlin_apply(t, spec.nonlinearity); });
    Vector next = sl.weight.transpose() * h + sl.bias;
    if (spec.skip_layers.count(l) != 0) next += a;
    a = std::move(next);
  }
  return a;
}

}  // namespace dvi
