#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "cadeblur/cadeblur.hpp"
#include "support/monitor.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace cadeblur;
using testkit::uniform_tensor;

namespace {

AttentionParams random_attention(ParameterStore& store, std::size_t c, std::size_t c2, std::mt19937_64& rng,
                                 AttentionVariant v = AttentionVariant::self) {
  AttentionParams p = make_attention(store, "a", {c, c2, v}, rng);
  for (Parameter* q : store.all()) q->value = uniform_tensor(q->value.shape(), rng);
  return p;
}

}  // namespace

TEST(Attention, MatrixEqualsStepwiseOnRandomShapes) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng() % 3, c = 1 + rng() % 7, c2 = 1 + rng() % 6, h = 1 + rng() % 10, w = 1 + rng() % 10;
    ParameterStore store;
    const AttentionParams p = random_attention(store, c, c2, rng);
    Tape t(false);
    Var x = t.constant(uniform_tensor({n, c, h, w}, rng, -2, 2));
    const Tensor a = efficient_attention(t, p, x).output.value();
    const Tensor b = efficient_attention_stepwise(t, p, x).output.value();
    ASSERT_LT(max_abs_diff(a, b), 1e-8) << "n=" << n << " c=" << c << " c2=" << c2 << " h=" << h << " w=" << w;
  }
}

TEST(Attention, MatchesScalarOracle) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 30; ++i) {
    const std::size_t c = 1 + rng() % 5, c2 = 1 + rng() % 4;
    ParameterStore store;
    const AttentionParams p = random_attention(store, c, c2, rng);
    const Tensor x = uniform_tensor({2, c, 1 + rng() % 6, 1 + rng() % 6}, rng, -2, 2);
    Tape t(false);
    EXPECT_LT(max_abs_diff(efficient_attention(t, p, t.constant(x)).output.value(), testkit::attention_oracle(p, x, x)),
              1e-12);
  }
}

TEST(Attention, CrossAttentionMatchesOracleAndReducesToSelf) {
  std::mt19937_64 rng(13);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 4, 3, rng, AttentionVariant::cross);
  const Tensor x = uniform_tensor({2, 4, 5, 6}, rng), s = uniform_tensor({2, 4, 5, 6}, rng);
  Tape t(false);
  Var xv = t.constant(x), sv = t.constant(s);
  EXPECT_LT(max_abs_diff(cross_attention(t, p, sv, xv).output.value(), testkit::attention_oracle(p, s, x)), 1e-12);
  EXPECT_LT(max_abs_diff(cross_attention(t, p, sv, xv).output.value(),
                         cross_attention_stepwise(t, p, sv, xv).output.value()),
            1e-12);
  EXPECT_LT(max_abs_diff(cross_attention(t, p, xv, xv).output.value(), efficient_attention(t, p, xv).output.value()),
            1e-15);
  // The maps come from the target only.
  const AttentionResult r = cross_attention(t, p, sv, xv);
  const AttentionResult self = efficient_attention(t, p, xv);
  EXPECT_EQ(max_abs_diff(r.maps.clusters.value(), self.maps.clusters.value()), 0.0);
  EXPECT_EQ(max_abs_diff(r.maps.mask.value(), self.maps.mask.value()), 0.0);
}

TEST(Attention, SoftmaxNormalizations) {
  std::mt19937_64 rng(14);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 5, 4, rng);
  Tape t(false);
  const AttentionResult r = efficient_attention(t, p, t.constant(uniform_tensor({2, 5, 7, 9}, rng, -10, 10)));
  const Tensor& q = r.maps.clusters.value();
  const Tensor& m = r.maps.mixing.value();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < 63; ++i) s += q[(b * 4 + k) * 63 + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    for (std::size_t i = 0; i < 63; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += m[(b * 4 + k) * 63 + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
  for (double v : r.maps.mask.value().values()) EXPECT_TRUE(v > 0 && v < 1);
  for (double v : r.maps.gate.value().values()) EXPECT_TRUE(v > 0 && v < 1);
}

TEST(Attention, NoQuadraticBuffer) {
  std::mt19937_64 rng(15);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 8, 4, rng);
  const Tensor x = uniform_tensor({1, 8, 48, 48}, rng);
  AllocationAudit audit;
  Tape t;
  Var xv = t.leaf(x);
  Var y = efficient_attention(t, p, xv).output;
  t.backward(ops::sum_all(y));
  const std::size_t hw = 48 * 48;
  EXPECT_LT(audit.largest(), hw * hw / 16);
  EXPECT_LE(audit.largest(), 8 * hw);
}

TEST(Attention, PixelPermutationEquivariance) {
  // Self-attention is a global operator: permuting the pixels permutes the output.
  std::mt19937_64 rng(16);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 3, 2, rng);
  const Tensor x = uniform_tensor({1, 3, 4, 5}, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp(x.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 20; ++i) xp[c * 20 + i] = x[c * 20 + perm[i]];
  Tape t(false);
  const Tensor y = efficient_attention(t, p, t.constant(x)).output.value();
  const Tensor yp = efficient_attention(t, p, t.constant(xp)).output.value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(yp[c * 20 + i], y[c * 20 + perm[i]], 1e-12);
}

TEST(Attention, SingleClusterIsGatedMeanBroadcast) {
  // With C2 = 1, P is identically 1 and y[c,i] = M2[c] * sum_j Q[j] xm[c,j] for every pixel.
  std::mt19937_64 rng(17);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 3, 1, rng);
  Tape t(false);
  const AttentionResult r = efficient_attention(t, p, t.constant(uniform_tensor({1, 3, 4, 4}, rng)));
  for (double v : r.maps.mixing.value().values()) EXPECT_DOUBLE_EQ(v, 1.0);
  const Tensor& y = r.output.value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 1; i < 16; ++i) EXPECT_NEAR(y[c * 16 + i], y[c * 16], 1e-14);
}

TEST(Attention, RejectsBadShapes) {
  std::mt19937_64 rng(18);
  ParameterStore store;
  const AttentionParams p = random_attention(store, 4, 2, rng);
  Tape t(false);
  EXPECT_THROW(efficient_attention(t, p, t.constant(Tensor({1, 3, 4, 4}))), DimensionError);
  EXPECT_THROW(cross_attention(t, p, t.constant(Tensor({1, 4, 2, 4})), t.constant(Tensor({1, 4, 4, 4}))),
               DimensionError);
  ParameterStore s2;
  EXPECT_THROW(make_attention(s2, "z", {4, 0, AttentionVariant::self}, rng), ConfigError);
}

TEST(StandardAttention, RefusesBeyondGuard) {
  std::mt19937_64 rng(19);
  const StandardAttentionParams p = make_standard_attention(2, 2, 2, rng);
  EXPECT_NO_THROW(standard_attention(Tensor({2, 4, 4}), p, 16));
  EXPECT_THROW(standard_attention(Tensor({2, 4, 5}), p, 16), CapacityError);
}

TEST(StandardAttention, UniformScoresAverageValues) {
  // Zero query weights give uniform attention: every output is the mean value embedding.
  std::mt19937_64 rng(20);
  StandardAttentionParams p = make_standard_attention(2, 3, 2, rng);
  p.query.fill(0.0);
  const Tensor x = uniform_tensor({2, 3, 3}, rng);
  const Tensor y = standard_attention(x, p);
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0;
    for (std::size_t j = 0; j < 9; ++j)
      for (std::size_t c = 0; c < 2; ++c) mean += x[c * 9 + j] * p.value[c * 2 + d] / 9.0;
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(y[d * 9 + j], mean, 1e-12);
  }
}
