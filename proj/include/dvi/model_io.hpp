#pragma once

// Portable JSON model artifact: network layout, variational parameters and the
// standardization needed to predict in original units.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvi/datasets.hpp"
#include "dvi/errors.hpp"
#include "dvi/network.hpp"
#include "dvi/trainkit.hpp"

namespace dvi {

inline constexpr int kModelFormatVersion = 1;

struct ModelArtifact {
  NetworkSpec spec;
  ModelParams params;
  Inference inference = Inference::kDVI;
  int eval_samples = 100;
  std::uint64_t seed = 0;
  Standardization stats;
  std::vector<int> dropped_indices;
  int original_width = 0;
};

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
  const auto d = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(d.size()) != r * c) throw StructuralError("model: matrix data has wrong length");
  Matrix m(r, c);
  std::copy(d.begin(), d.end(), m.data());
  return m;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }
inline Vector from_std(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const ModelArtifact& a) {
  nlohmann::json blocks;
  for (const auto& [k, v] : a.params.to_blocks(a.spec)) blocks[k] = detail::matrix_to_json(v);
  nlohmann::json j{
      {"format", "dvi-model"},
      {"version", kModelFormatVersion},
      {"layer_sizes", a.spec.layer_sizes},
      {"nonlinearity", a.spec.nonlinearity == Nonlinearity::kReLU ? "relu" : "heaviside"},
      {"head", a.spec.head == Head::kHomoRegression ? "homo" : "hetero"},
      {"cov_mode", a.spec.cov_mode == CovMode::kFull ? "full" : "diagonal"},
      {"skip_layers", std::vector<int>(a.spec.skip_layers.begin(), a.spec.skip_layers.end())},
      {"inference", a.inference == Inference::kMCVI ? "MCVI" : (a.inference == Inference::kDDVI ? "dDVI" : "DVI")},
      {"eval_samples", a.eval_samples},
      {"seed", a.seed},
      {"x_mean", detail::to_std(a.stats.x_mean)},
      {"x_std", detail::to_std(a.stats.x_std)},
      {"y_mean", a.stats.y_mean},
      {"y_std", a.stats.y_std},
      {"dropped_indices", a.dropped_indices},
      {"original_width", a.original_width},
      {"params", blocks},
  };
  std::ofstream out(path);
  if (!out) throw StructuralError("save_model: cannot write " + path.string());
  out << j.dump(1) << '\n';
}

inline ModelArtifact load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StructuralError("load_model: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("load_model: ") + e.what());
  }
  try {
    if (j.at("format") != "dvi-model" || j.at("version").get<int>() != kModelFormatVersion)
      throw StructuralError("load_model: unsupported artifact format or version");
    ModelArtifact a;
    a.spec.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    a.spec.nonlinearity = j.at("nonlinearity") == "relu" ? Nonlinearity::kReLU : Nonlinearity::kHeaviside;
    a.spec.head = j.at("head") == "homo" ? Head::kHomoRegression : Head::kHeteroRegression;
    a.spec.cov_mode = j.at("cov_mode") == "full" ? CovMode::kFull : CovMode::kDiagonal;
    for (int s : j.at("skip_layers").get<std::vector<int>>()) a.spec.skip_layers.insert(s);
    a.spec.validate();
    const std::string inf = j.at("inference");
    a.inference = inf == "MCVI" ? Inference::kMCVI : (inf == "dDVI" ? Inference::kDDVI : Inference::kDVI);
    a.eval_samples = j.at("eval_samples").get<int>();
    a.seed = j.at("seed").get<std::uint64_t>();
    a.stats.x_mean = detail::from_std(j.at("x_mean").get<std::vector<double>>());
    a.stats.x_std = detail::from_std(j.at("x_std").get<std::vector<double>>());
    a.stats.y_mean = j.at("y_mean").get<double>();
    a.stats.y_std = j.at("y_std").get<double>();
    a.dropped_indices = j.at("dropped_indices").get<std::vector<int>>();
    a.original_width = j.at("original_width").get<int>();
    std::map<std::string, Matrix> blocks;
    for (const auto& [k, v] : j.at("params").items()) blocks[k] = detail::matrix_from_json(v);
    a.params.layers.resize(static_cast<std::size_t>(a.spec.num_layers()));
    a.params.from_blocks(a.spec, blocks);
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("load_model: malformed artifact: ") + e.what());
  }
}

}  // namespace dvi
