#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace cadeblur::blas {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using ConstView = Eigen::Map<const RowMajor, Eigen::Unaligned, Stride>;
using View = Eigen::Map<RowMajor, Eigen::Unaligned, Stride>;

inline Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

template <typename A, typename B>
void accumulate(View& c, const A& a, const B& b, double alpha, double beta) {
  if (beta == 0.0) {
    c.noalias() = alpha * (a * b);
  } else {
    if (beta != 1.0) c *= beta;
    c.noalias() += alpha * (a * b);
  }
}

}  // namespace detail

/// Row-major C = alpha * op(A) * op(B) + beta * C with explicit leading
/// dimensions, op(A) is m x k, op(B) is k x n. With beta == 0, C is not read.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
  using detail::idx;
  if (m == 0 || n == 0) return;
  detail::View cv(c, idx(m), idx(n), detail::Stride(idx(ldc)));
  const detail::ConstView av(a, trans_a ? idx(k) : idx(m), trans_a ? idx(m) : idx(k), detail::Stride(idx(lda)));
  const detail::ConstView bv(b, trans_b ? idx(n) : idx(k), trans_b ? idx(k) : idx(n), detail::Stride(idx(ldb)));
  if (trans_a && trans_b) {
    detail::accumulate(cv, av.transpose(), bv.transpose(), alpha, beta);
  } else if (trans_a) {
    detail::accumulate(cv, av.transpose(), bv, alpha, beta);
  } else if (trans_b) {
    detail::accumulate(cv, av, bv.transpose(), alpha, beta);
  } else {
    detail::accumulate(cv, av, bv, alpha, beta);
  }
}

/// Same on densely packed operands.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, const double* b, double beta, double* c) {
  gemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

}  // namespace cadeblur::blas
