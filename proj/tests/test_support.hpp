#pragma once

// Shared fixtures for the test binaries.

#include <string>

#include "dvi/gradcheck.hpp"
#include "dvi/moment_graph.hpp"
#include "dvi/network.hpp"

namespace dvi::test_support {

inline ParamVars param_vars_from(const NetworkSpec& spec, const grad::VarMap& v) {
  ParamVars pv;
  for (int l = 0; l < spec.num_layers(); ++l) {
    LayerVars lv;
    lv.w_mean = v.at(ModelParams::block_name(l, "w_mean"));
    lv.w_logvar = v.at(ModelParams::block_name(l, "w_logvar"));
    lv.b_mean = v.at(ModelParams::block_name(l, "b_mean"));
    lv.b_logvar = v.at(ModelParams::block_name(l, "b_logvar"));
    pv.layers.push_back(lv);
  }
  if (spec.head == Head::kHomoRegression) pv.log_noise = v.at("log_noise");
  return pv;
}

inline ModelParams params_from(const grad::Tape& t, const NetworkSpec& spec, const grad::VarMap& v) {
  std::map<std::string, Matrix> blocks;
  for (const auto& [k, var] : v) blocks[k] = t.value(var);
  ModelParams p;
  p.layers.resize(static_cast<std::size_t>(spec.num_layers()));
  p.from_blocks(spec, blocks);
  return p;
}

}  // namespace dvi::test_support
