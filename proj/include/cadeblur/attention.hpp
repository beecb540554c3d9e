#pragma once

// Global attention with linear cost in the number of pixels.
//
// For an input x [N,C,H,W] the block computes
//   M1 = sigmoid(f_m1(x))                       [N,1,H,W]  spatial mask
//   xm = x * M1                                 (broadcast over channels)
//   Q  = softmax_HW(f_q(xm))                    [N,C2,HW]  attention clusters
//   P  = softmax_C2(f_p(xm))                    [N,C2,HW]  per-pixel mixing
//   M2 = sigmoid(GAP(f_m2(xm)))                 [N,C,1]    channel gate
//   y  = ((xm Q^T) * M2) P                      [N,C,HW]
// The product is evaluated left to right, so nothing larger than C x HW or
// C2 x HW is ever allocated. All f_* are 1x1 convolutions.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cadeblur/core/gemm.hpp"
#include "cadeblur/core/ops.hpp"
#include "cadeblur/core/parameters.hpp"

namespace cadeblur {

enum class AttentionVariant { self, cross };

struct AttentionConfig {
  std::size_t channels = 32;
  std::size_t clusters = 8;
  AttentionVariant variant = AttentionVariant::self;
};

struct AttentionParams {
  AttentionConfig config;
  ConvLayer mask;     // C -> 1, sigmoid
  ConvLayer query;    // C -> C2, softmax over HW
  ConvLayer mixing;   // C -> C2, softmax over C2
  ConvLayer channel;  // C -> C, then GAP and sigmoid
};

inline AttentionParams make_attention(ParameterStore& store, const std::string& prefix, AttentionConfig cfg,
                                      std::mt19937_64& rng) {
  if (cfg.channels == 0 || cfg.clusters == 0) throw ConfigError("attention needs C >= 1 and C2 >= 1");
  const ConvInit init{1.0, 0.0};
  AttentionParams p;
  p.config = cfg;
  p.mask = make_conv(store, prefix + ".m1", cfg.channels, 1, 1, rng, init);
  p.query = make_conv(store, prefix + ".q", cfg.channels, cfg.clusters, 1, rng, init);
  p.mixing = make_conv(store, prefix + ".p", cfg.channels, cfg.clusters, 1, rng, init);
  p.channel = make_conv(store, prefix + ".m2", cfg.channels, cfg.channels, 1, rng, init);
  return p;
}

/// Intermediate maps of one attention evaluation.
struct AttentionMaps {
  Var mask;      // M1 [N,1,H,W]
  Var clusters;  // Q  [N,C2,HW], each cluster sums to 1 over HW
  Var mixing;    // P  [N,C2,HW], each pixel column sums to 1 over C2
  Var gate;      // M2 [N,C,1]
  Var values;    // masked value stream [N,C,HW]
};

struct AttentionResult {
  Var output;  // [N,C,H,W]
  AttentionMaps maps;
  /// Pooled cluster descriptors before gating, [N,C,C2]. Stepwise path only.
  std::optional<Tensor> descriptors;
};

/// Opt-in check of the softmax normalisations on every attention forward:
/// each cluster of Q sums to 1 over HW and each pixel of P sums to 1 over C2.
/// Records the largest deviation seen while enabled.
class NormalizationMonitor {
 public:
  static void enable(bool on = true) { enabled_flag().store(on); }
  static bool enabled() { return enabled_flag().load(); }
  static void reset() {
    std::lock_guard<std::mutex> lock(mutex());
    state() = {};
  }
  static double max_deviation() {
    std::lock_guard<std::mutex> lock(mutex());
    return state().max_deviation;
  }
  static std::size_t passes() {
    std::lock_guard<std::mutex> lock(mutex());
    return state().passes;
  }

  /// clusters and mixing are [N,C2,HW].
  static void observe(const Tensor& clusters, const Tensor& mixing) {
    const std::size_t n = clusters.dim(0), c2 = clusters.dim(1), hw = clusters.dim(2);
    double dev = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t k = 0; k < c2; ++k) {
        const double* q = clusters.data() + (b * c2 + k) * hw;
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += q[i];
        dev = std::max(dev, std::abs(s - 1.0));
      }
      for (std::size_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < c2; ++k) s += mixing[(b * c2 + k) * hw + i];
        dev = std::max(dev, std::abs(s - 1.0));
      }
    }
    std::lock_guard<std::mutex> lock(mutex());
    state().max_deviation = std::max(state().max_deviation, dev);
    ++state().passes;
  }

 private:
  struct State {
    double max_deviation = 0.0;
    std::size_t passes = 0;
  };
  static std::atomic<bool>& enabled_flag() {
    static std::atomic<bool> flag{false};
    return flag;
  }
  static State& state() {
    static State s;
    return s;
  }
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
};

namespace detail {

inline void check_attention_input(const AttentionParams& p, const Shape& s, const char* what) {
  if (s.size() != 4 || s[1] != p.config.channels) {
    throw DimensionError(std::string(what) + " must be [N," + std::to_string(p.config.channels) + ",H,W], got " +
                         shape_string(s));
  }
}

/// Maps are generated from `target`; the value stream is `source` masked by
/// the target's M1. With source == target this is self-attention.
inline AttentionMaps attention_maps(Tape& t, const AttentionParams& p, Var source, Var target) {
  check_attention_input(p, target.shape(), "attention input");
  check_attention_input(p, source.shape(), "attention source");
  if (source.shape() != target.shape()) {
    throw DimensionError("cross-attention source " + shape_string(source.shape()) + " and target " +
                         shape_string(target.shape()) + " must be spatially aligned");
  }
  const std::size_t n = target.dim(0), c = p.config.channels, c2 = p.config.clusters;
  const std::size_t hw = target.dim(2) * target.dim(3);

  AttentionMaps m;
  m.mask = ops::sigmoid(p.mask(t, target));
  Var masked_target = ops::mul(target, m.mask);
  m.clusters = ops::softmax(ops::reshape(p.query(t, masked_target), {n, c2, hw}), 2);
  m.mixing = ops::softmax(ops::reshape(p.mixing(t, masked_target), {n, c2, hw}), 1);
  m.gate = ops::reshape(ops::sigmoid(ops::global_avg_pool(p.channel(t, masked_target))), {n, c, 1});
  if (NormalizationMonitor::enabled()) NormalizationMonitor::observe(m.clusters.value(), m.mixing.value());
  Var masked_source = source.id == target.id ? masked_target : ops::mul(source, m.mask);
  m.values = ops::reshape(masked_source, {n, c, hw});
  return m;
}

inline AttentionResult matrix_form(Tape& t, const AttentionParams& p, Var source, Var target) {
  AttentionResult r;
  r.maps = attention_maps(t, p, source, target);
  // (A softmax(B)^T): [N,C,HW] x [N,HW,C2] -> [N,C,C2]
  Var pooled = ops::matmul(r.maps.values, r.maps.clusters, false, true);
  Var gated = ops::mul(pooled, r.maps.gate);
  // [N,C,C2] x [N,C2,HW] -> [N,C,HW]
  Var y = ops::matmul(gated, r.maps.mixing);
  r.output = ops::reshape(y, target.shape());
  return r;
}

}  // namespace detail

/// Matrix form: y = (A softmax(B)^T * M2) softmax(D). Never allocates an
/// HW x HW buffer.
inline AttentionResult efficient_attention(Tape& t, const AttentionParams& p, Var x) {
  return detail::matrix_form(t, p, x, x);
}

/// Cross-attention: values pooled from `source`, every map generated from
/// `target`. Reduces to efficient_attention(target) when source == target.
inline AttentionResult cross_attention(Tape& t, const AttentionParams& p, Var source, Var target) {
  return detail::matrix_form(t, p, source, target);
}

/// The same operator evaluated one cluster at a time: mask, per-cluster
/// weighted global-sum-pooling, channel gate, per-pixel recombination and a
/// sum over clusters. Reference path for the matrix form.
inline AttentionResult cross_attention_stepwise(Tape& t, const AttentionParams& p, Var source, Var target) {
  AttentionResult r;
  r.maps = detail::attention_maps(t, p, source, target);
  const Var& x = target;
  const std::size_t n = x.dim(0), c = p.config.channels, c2 = p.config.clusters;
  Tensor descriptors({n, c, c2});
  std::optional<Var> y;
  for (std::size_t k = 0; k < c2; ++k) {
    Var qk = ops::slice(r.maps.clusters, 1, k);                      // [N,1,HW]
    Var pooled = ops::sum(ops::mul(r.maps.values, qk), {2});         // [N,C,1]
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) descriptors[(b * c + ch) * c2 + k] = pooled.value()[b * c + ch];
    Var gated = ops::mul(pooled, r.maps.gate);                       // [N,C,1]
    Var yk = ops::mul(gated, ops::slice(r.maps.mixing, 1, k));       // [N,C,HW]
    y = y ? ops::add(*y, yk) : yk;
  }
  r.output = ops::reshape(*y, x.shape());
  r.descriptors = std::move(descriptors);
  return r;
}

inline AttentionResult efficient_attention_stepwise(Tape& t, const AttentionParams& p, Var x) {
  return cross_attention_stepwise(t, p, x, x);
}

// ---------------------------------------------------------------------------
// Standard dot-product attention, O((HW)^2) memory. Complexity baseline only.

struct StandardAttentionParams {
  Tensor query;  // [C, d_a]
  Tensor key;    // [C, d_a]
  Tensor value;  // [C, d_c]
};

inline StandardAttentionParams make_standard_attention(std::size_t channels, std::size_t d_a, std::size_t d_c,
                                                       std::mt19937_64& rng) {
  return {scaled_normal({channels, d_a}, channels, 1.0, rng), scaled_normal({channels, d_a}, channels, 1.0, rng),
          scaled_normal({channels, d_c}, channels, 1.0, rng)};
}

constexpr std::size_t kStandardAttentionMaxPositions = std::size_t{1} << 14;

/// softmax(A B^T / sqrt(d_a)) C for x [C,H,W]; returns [d_c,H,W]. Throws
/// CapacityError when HW exceeds `max_positions`.
inline Tensor standard_attention(const Tensor& x, const StandardAttentionParams& p,
                                 std::size_t max_positions = kStandardAttentionMaxPositions) {
  if (x.rank() != 3 || p.query.dim(0) != x.dim(0)) {
    throw DimensionError("standard_attention expects [C,H,W] matching the embedding, got " + shape_string(x.shape()));
  }
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const std::size_t da = p.query.dim(1), dc = p.value.dim(1);
  if (hw > max_positions) {
    throw CapacityError("standard attention needs a " + std::to_string(hw) + "x" + std::to_string(hw) +
                        " score matrix; guard is " + std::to_string(max_positions) + " positions");
  }
  Tensor a({hw, da}), b({hw, da}), v({hw, dc});
  // z = x^T is [HW, C]; embeddings are z W.
  blas::gemm(true, false, hw, da, c, 1.0, x.data(), p.query.data(), 0.0, a.data());
  blas::gemm(true, false, hw, da, c, 1.0, x.data(), p.key.data(), 0.0, b.data());
  blas::gemm(true, false, hw, dc, c, 1.0, x.data(), p.value.data(), 0.0, v.data());
  Tensor scores({hw, hw});
  blas::gemm(false, true, hw, hw, da, 1.0 / std::sqrt(static_cast<double>(da)), a.data(), b.data(), 0.0,
             scores.data());
  for (std::size_t i = 0; i < hw; ++i) {  // row softmax in place
    double* row = scores.data() + i * hw;
    const double m = *std::max_element(row, row + hw);
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < hw; ++j) row[j] /= s;
  }
  Tensor out({hw, dc});
  blas::gemm(false, false, hw, dc, hw, 1.0, scores.data(), v.data(), 0.0, out.data());
  Tensor y({dc, x.dim(1), x.dim(2)});
  for (std::size_t j = 0; j < hw; ++j)
    for (std::size_t d = 0; d < dc; ++d) y[d * hw + j] = out[j * dc + d];
  return y;
}

}  // namespace cadeblur
