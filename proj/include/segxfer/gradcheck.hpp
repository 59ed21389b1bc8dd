#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "segxfer/autodiff.hpp"
#include "segxfer/rng.hpp"

namespace segxfer {

struct GradCheckOptions {
  double step = 1e-4;
  /// Entries probed per input tensor; 0 probes every entry.
  std::size_t max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t probes = 0;

  bool passed(double tolerance) const { return max_relative_error < tolerance; }
};

/// Builds a scalar loss from trainable leaves inside the given graph.
using LossBuilder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `build` with central differences:
/// error = |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckResult grad_check(const LossBuilder& build, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& options = {}) {
  auto evaluate = [&](const std::vector<Tensor<double>>& values) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& v : values) leaves.push_back(g.constant(v));
    return build(g, leaves).value()[0];
  };

  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& v : inputs) leaves.push_back(g.parameter(v));
    Var<double> loss = build(g, leaves);
    g.backward(loss);
    for (const auto& l : leaves) analytic.push_back(g.grad(l));
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> probe(inputs[i].size());
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    if (options.max_entries_per_input != 0 && probe.size() > options.max_entries_per_input) {
      rng.shuffle(probe.begin(), probe.end());
      probe.resize(options.max_entries_per_input);
    }
    for (std::size_t idx : probe) {
      const double original = inputs[i][idx];
      inputs[i][idx] = original + options.step;
      const double up = evaluate(inputs);
      inputs[i][idx] = original - options.step;
      const double down = evaluate(inputs);
      inputs[i][idx] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i][idx];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.probes;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = i;
        result.worst_index = idx;
      }
    }
  }
  return result;
}

}  // namespace segxfer
