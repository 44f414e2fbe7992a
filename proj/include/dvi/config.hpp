#pragma once

// JSON run configuration for the command-line tool, with strict key checking.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvi/network.hpp"
#include "dvi/trainkit.hpp"

namespace dvi::config {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// What a method name in a benchmark grid maps to.
struct MethodSpec {
  std::string name;
  Inference inference = Inference::kDVI;
  Head head = Head::kHeteroRegression;
  McMode mc_mode = McMode::kWeightSampling;
};

inline MethodSpec parse_method(const std::string& s) {
  if (s == "DVI") return {s, Inference::kDVI, Head::kHeteroRegression, McMode::kWeightSampling};
  if (s == "dDVI") return {s, Inference::kDDVI, Head::kHeteroRegression, McMode::kWeightSampling};
  if (s == "hoDVI") return {s, Inference::kDVI, Head::kHomoRegression, McMode::kWeightSampling};
  if (s == "MCVI") return {s, Inference::kMCVI, Head::kHeteroRegression, McMode::kWeightSampling};
  if (s == "rMCVI") return {s, Inference::kMCVI, Head::kHeteroRegression, McMode::kLocalReparam};
  throw ConfigError("methods: unknown method '" + s + "' (expected DVI, dDVI, hoDVI, MCVI or rMCVI)");
}

struct DatasetRef {
  std::string name;
  std::filesystem::path path;
};

struct ModelConfig {
  std::vector<int> hidden{50};
  Nonlinearity nonlinearity = Nonlinearity::kReLU;
  std::set<int> skip_layers;
};

struct TrainJob {
  DatasetRef dataset;
  ModelConfig model;
  MethodSpec method;
  TrainConfig train;
  std::uint64_t split_seed = 0;
  double train_fraction = 0.9;
  std::filesystem::path output_dir = "runs";
  json raw;
};

struct BenchmarkJob {
  std::vector<DatasetRef> datasets;
  std::vector<MethodSpec> methods;
  ModelConfig model;
  TrainConfig train;
  int splits = 20;
  std::uint64_t split_seed = 0;
  double train_fraction = 0.9;
  std::vector<double> prior_sweep;  // fixed prior variances, each run next to EB
  std::filesystem::path output_dir = "runs";
  json raw;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (allowed.count(k) == 0) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
T get(const json& j, const std::string& key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + key + ": wrong type");
  }
}

inline double positive(double v, const std::string& field) {
  if (!(v > 0.0)) throw ConfigError(field + ": must be positive");
  return v;
}

inline std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  return p.is_relative() ? base / p : p;
}

inline DatasetRef resolve_dataset(const std::string& entry, const std::optional<std::filesystem::path>& registry,
                                  const std::filesystem::path& base) {
  if (registry) {
    const auto reg = load_registry(*registry);
    auto it = reg.find(entry);
    if (it != reg.end()) return {entry, it->second};
  }
  const std::filesystem::path p = resolve(entry, base);
  if (!std::filesystem::exists(p))
    throw ConfigError("dataset: '" + entry + "' is neither a registry name nor an existing file");
  return {p.stem().string(), p};
}

inline ModelConfig parse_model(const json& j) {
  ModelConfig m;
  if (j.is_null()) return m;
  check_keys(j, "network", {"hidden", "nonlinearity", "skip_layers"});
  m.hidden = get<std::vector<int>>(j, "hidden", "network.", m.hidden);
  for (int h : m.hidden)
    if (h <= 0) throw ConfigError("network.hidden: widths must be positive");
  const std::string nl = get<std::string>(j, "nonlinearity", "network.", "relu");
  if (nl == "relu") {
    m.nonlinearity = Nonlinearity::kReLU;
  } else if (nl == "heaviside") {
    m.nonlinearity = Nonlinearity::kHeaviside;
  } else {
    throw ConfigError("network.nonlinearity: expected 'relu' or 'heaviside'");
  }
  for (int s : get<std::vector<int>>(j, "skip_layers", "network.", {})) m.skip_layers.insert(s);
  return m;
}

inline PriorConfig parse_prior(const json& j) {
  PriorConfig p;
  if (j.is_null()) return p;
  check_keys(j, "prior", {"type", "alpha", "beta", "variance"});
  const std::string type = get<std::string>(j, "type", "prior.", "eb");
  if (type == "eb") {
    p.empirical_bayes = true;
  } else if (type == "fixed") {
    p.empirical_bayes = false;
  } else {
    throw ConfigError("prior.type: expected 'eb' or 'fixed'");
  }
  p.alpha = positive(get<double>(j, "alpha", "prior.", p.alpha), "prior.alpha");
  p.beta = positive(get<double>(j, "beta", "prior.", p.beta), "prior.beta");
  p.fixed_variance = positive(get<double>(j, "variance", "prior.", p.fixed_variance), "prior.variance");
  return p;
}

inline const std::set<std::string>& training_keys() {
  static const std::set<std::string> keys{"learning_rate", "batch_size", "epochs",       "seed",
                                          "mc_samples",    "prior",      "eval_samples", "eval_every"};
  return keys;
}

inline TrainConfig parse_training(const json& j) {
  TrainConfig t;
  t.learning_rate = positive(get<double>(j, "learning_rate", "", t.learning_rate), "learning_rate");
  t.batch_size = get<int>(j, "batch_size", "", t.batch_size);
  if (t.batch_size < 0) throw ConfigError("batch_size: must be >= 0 (0 selects min(128, N))");
  t.epochs = get<int>(j, "epochs", "", t.epochs);
  if (t.epochs < 0) throw ConfigError("epochs: must be >= 0");
  t.seed = get<std::uint64_t>(j, "seed", "", t.seed);
  t.mc.samples = get<int>(j, "mc_samples", "", t.mc.samples);
  if (t.mc.samples < 1) throw ConfigError("mc_samples: must be >= 1");
  t.eval_samples = get<int>(j, "eval_samples", "", t.eval_samples);
  if (t.eval_samples < 1) throw ConfigError("eval_samples: must be >= 1");
  t.eval_every = get<int>(j, "eval_every", "", t.eval_every);
  t.prior = parse_prior(j.contains("prior") ? j.at("prior") : json());
  return t;
}

inline void apply_method(TrainConfig& t, const MethodSpec& m) {
  t.inference = m.inference;
  t.mc.mode = m.mc_mode;
}

inline std::filesystem::path output_dir(const json& j, const std::filesystem::path& base) {
  if (const char* env = std::getenv("DVI_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return resolve(get<std::string>(j, "output_dir", "", "runs"), base);
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
}

inline std::optional<std::filesystem::path> registry_of(const json& j, const std::filesystem::path& base) {
  if (!j.contains("registry")) return std::nullopt;
  const auto p = resolve(get<std::string>(j, "registry", "", ""), base);
  if (!std::filesystem::exists(p)) throw ConfigError("registry: file not found: " + p.string());
  return p;
}

}  // namespace detail

inline TrainJob parse_train(const json& j, const std::filesystem::path& base = ".") {
  std::set<std::string> allowed = detail::training_keys();
  allowed.insert({"dataset", "registry", "network", "method", "split_seed", "train_fraction", "output_dir"});
  detail::check_keys(j, "config", allowed);
  if (!j.contains("dataset")) throw ConfigError("dataset: required field is missing");
  TrainJob job;
  job.raw = j;
  job.dataset = detail::resolve_dataset(detail::get<std::string>(j, "dataset", "", ""), detail::registry_of(j, base), base);
  job.model = detail::parse_model(j.contains("network") ? j.at("network") : json());
  job.method = parse_method(detail::get<std::string>(j, "method", "", "DVI"));
  job.train = detail::parse_training(j);
  detail::apply_method(job.train, job.method);
  job.split_seed = detail::get<std::uint64_t>(j, "split_seed", "", 0);
  job.train_fraction = detail::get<double>(j, "train_fraction", "", 0.9);
  if (!(job.train_fraction > 0.0 && job.train_fraction < 1.0)) throw ConfigError("train_fraction: must lie in (0, 1)");
  job.output_dir = detail::output_dir(j, base);
  return job;
}

inline BenchmarkJob parse_benchmark(const json& j, const std::filesystem::path& base = ".") {
  std::set<std::string> allowed = detail::training_keys();
  allowed.insert({"datasets", "registry", "network", "methods", "splits", "split_seed", "train_fraction",
                  "prior_sweep", "output_dir"});
  detail::check_keys(j, "config", allowed);
  if (!j.contains("datasets")) throw ConfigError("datasets: required field is missing");
  BenchmarkJob job;
  job.raw = j;
  const auto reg = detail::registry_of(j, base);
  for (const auto& d : detail::get<std::vector<std::string>>(j, "datasets", "", {}))
    job.datasets.push_back(detail::resolve_dataset(d, reg, base));
  if (job.datasets.empty()) throw ConfigError("datasets: list is empty");
  for (const auto& m : detail::get<std::vector<std::string>>(j, "methods", "", {"DVI", "MCVI"}))
    job.methods.push_back(parse_method(m));
  job.model = detail::parse_model(j.contains("network") ? j.at("network") : json());
  job.train = detail::parse_training(j);
  job.splits = detail::get<int>(j, "splits", "", 20);
  if (job.splits < 1) throw ConfigError("splits: must be >= 1");
  job.split_seed = detail::get<std::uint64_t>(j, "split_seed", "", 0);
  job.train_fraction = detail::get<double>(j, "train_fraction", "", 0.9);
  if (!(job.train_fraction > 0.0 && job.train_fraction < 1.0)) throw ConfigError("train_fraction: must lie in (0, 1)");
  job.prior_sweep = detail::get<std::vector<double>>(j, "prior_sweep", "", {});
  for (double v : job.prior_sweep) detail::positive(v, "prior_sweep");
  job.output_dir = detail::output_dir(j, base);
  return job;
}

inline NetworkSpec make_spec(const ModelConfig& m, int input_dim, Head head) {
  NetworkSpec s;
  s.layer_sizes.push_back(input_dim);
  for (int h : m.hidden) s.layer_sizes.push_back(h);
  s.layer_sizes.push_back(head == Head::kHomoRegression ? 1 : 2);
  s.nonlinearity = m.nonlinearity;
  s.head = head;
  s.skip_layers = m.skip_layers;
  try {
    s.validate();
  } catch (const StructuralError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
  return s;
}

// 64-bit FNV-1a over the canonical dump.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace dvi::config
