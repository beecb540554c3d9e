#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cadeblur/core/ops.hpp"
#include "cadeblur/core/tape.hpp"

namespace cadeblur {

/// Owns the parameters of one model. Ids are assigned in creation order, so
/// two stores built by the same code have matching ids.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& create(std::string name, Tensor init) {
    params_.emplace_back(std::move(name), std::move(init), params_.size());
    return params_.back();
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void zero_values() {
    for (auto& p : params_) p.value.fill(0.0);
  }

 private:
  std::deque<Parameter> params_;
};

/// Gaussian initialisation with standard deviation gain / sqrt(fan_in).
inline Tensor scaled_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

/// Square convolution layer with bias.
struct ConvLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  std::size_t stride = 1;
  ops::Padding padding = ops::Padding::zero;

  Var operator()(Tape& t, Var x) const {
    return ops::conv2d(x, t.param(*weight), t.param(*bias), stride, padding);
  }

  std::size_t in_channels() const { return weight->value.dim(1); }
  std::size_t out_channels() const { return weight->value.dim(0); }
  std::size_t kernel() const { return weight->value.dim(2); }
};

struct ConvInit {
  double gain = std::sqrt(2.0);
  double bias = 0.0;
};

inline ConvLayer make_conv(ParameterStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                           std::size_t k, std::mt19937_64& rng, ConvInit init = {}, std::size_t stride = 1) {
  ConvLayer c;
  c.weight = &store.create(name + ".weight", scaled_normal({cout, cin, k, k}, cin * k * k, init.gain, rng));
  c.bias = &store.create(name + ".bias", Tensor({cout}, init.bias));
  c.stride = stride;
  return c;
}

}  // namespace cadeblur
