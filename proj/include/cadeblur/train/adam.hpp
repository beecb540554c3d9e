#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cadeblur/core/errors.hpp"
#include "cadeblur/core/tape.hpp"

namespace cadeblur {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  void reset(const std::vector<Parameter*>& params) {
    m.clear();
    v.clear();
    for (const Parameter* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    step = 0;
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// A non-finite gradient aborts the step before anything is modified.
inline void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr,
                      const AdamOptions& opt = {}) {
  if (state.m.size() != params.size()) {
    if (state.step != 0 || !state.m.empty()) throw DimensionError("optimizer state does not match the parameter list");
    state.reset(params);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (p.grad.shape() != state.m[i].shape()) {
      throw DimensionError("optimizer moment shape mismatch for parameter " + std::to_string(p.id()));
    }
    if (!p.grad.all_finite()) {
      throw NumericalError("non-finite gradient in parameter " + std::to_string(p.id()) + " (" + p.name() + ")");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t), c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = opt.beta1 * m[k] + (1 - opt.beta1) * g;
      v[k] = opt.beta2 * v[k] + (1 - opt.beta2) * g * g;
      p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
    }
  }
}

}  // namespace cadeblur
