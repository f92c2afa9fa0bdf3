#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "covidx/autodiff.hpp"
#include "covidx/ops.hpp"
#include "covidx/rng.hpp"

namespace covidx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  // Coordinates whose +-step evaluations switched a relu sign or max-pool
  // winner; central differences are not a derivative there, so they are
  // counted here and left out of max_rel_error.
  std::size_t kink_coordinates = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // drawn without replacement from `seed`.
  std::size_t max_per_parameter = 0;
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares backward() against central differences
/// (f(theta+h) - f(theta-h)) / 2h for every selected coordinate of `params`.
/// `fn` must rebuild the graph on each call and return a scalar.
inline GradCheckResult gradient_check(const std::function<Var<double>()>& fn,
                                      const std::vector<Parameter<double>*>& params,
                                      const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) fail(ErrorKind::usage, "gradient_check: step must be positive");

  auto evaluate = [&](std::uint64_t& branches) {
    BranchTrace trace;
    const Var<double> out = fn();
    if (out.value().size() != 1) {
      fail(ErrorKind::numeric, "gradient_check: function output is not scalar, shape " +
                                   shape_str(out.shape()));
    }
    branches = trace.hash();
    return out.value()[0];
  };

  for (auto* p : params) p->zero_grad();
  backward(fn());
  std::vector<Tensor<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  Rng rng(opts.seed);
  NoGradGuard no_grad;
  std::uint64_t base = 0, up_branches = 0, down_branches = 0;
  evaluate(base);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    std::vector<std::size_t> coords(p.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_per_parameter && coords.size() > opts.max_per_parameter) {
      rng.shuffle(coords);
      coords.resize(opts.max_per_parameter);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p.value[i];
      p.value[i] = saved + opts.step;
      const double up = evaluate(up_branches);
      p.value[i] = saved - opts.step;
      const double down = evaluate(down_branches);
      p.value[i] = saved;
      ++result.coordinates;
      if (up_branches != base || down_branches != base) {
        ++result.kink_coordinates;
        continue;
      }
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = relative_error(analytic[pi][i], numeric);
      if (err > result.max_rel_error || result.worst_parameter.empty()) {
        result.max_rel_error = err;
        result.worst_parameter = p.id;
        result.worst_index = i;
        result.worst_analytic = analytic[pi][i];
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto* p : params) p->zero_grad();
  return result;
}

}  // namespace covidx
