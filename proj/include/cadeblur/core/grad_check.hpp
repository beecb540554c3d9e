#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cadeblur/core/tape.hpp"

namespace cadeblur {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per parameter tensor (all of them when smaller).
  std::size_t samples = 32;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. `loss` records the forward pass on the given tape and
/// returns the scalar loss. Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                                  GradCheckOptions opt = {}) {
  auto evaluate = [&]() {
    Tape t(false);
    const double v = loss(t).value()[0];
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
    return v;
  };

  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    Var l = loss(t);
    if (!std::isfinite(l.value()[0])) throw NumericalError("grad_check: non-finite loss");
    t.backward(l);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.samples) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.samples);
    }
    for (std::size_t i : coords) {
      const double saved = p.value[i];
      p.value[i] = saved + opt.step;
      const double up = evaluate();
      p.value[i] = saved - opt.step;
      const double down = evaluate();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = p.name();
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cadeblur
