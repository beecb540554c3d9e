#pragma once

// Differentiable operations recorded on a Tape.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cadeblur/core/kernels.hpp"
#include "cadeblur/core/tape.hpp"

namespace cadeblur::ops {

using kernels::Padding;

namespace detail {

inline void accumulate(Var v, const Tensor& g) {
  if (!v.tape->requires_grad(v)) return;
  Tensor& dst = v.tape->grad(v);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

template <typename Fn>
Tensor map(const Tensor& x, Fn&& fn) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape->push("reshape", std::move(y), {x}, [x](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor& g = x.tape->grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
  });
}

/// Selects index `index` of `axis`, keeping the axis with extent 1.
inline Var slice(Var x, std::size_t axis, std::size_t index) {
  const kernels::AxisSplit sp = kernels::split_axis(x.shape(), axis);
  if (index >= sp.extent) throw DimensionError("slice index out of range");
  Shape s = x.shape();
  s[axis] = 1;
  Tensor y(s);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] = xv[(o * sp.extent + index) * sp.inner + i];
  return x.tape->push("slice", std::move(y), {x}, [x, sp, index](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor& g = x.tape->grad(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.extent + index) * sp.inner + i] += dy[o * sp.inner + i];
  });
}

/// [N,C,H,W] -> [N*rows*cols, C, H/rows, W/cols], row-major patch order.
inline Var split_patches(Var x, std::size_t rows, std::size_t cols) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % rows != 0 || s[3] % cols != 0) {
    throw DimensionError("cannot split " + shape_string(s) + " into a " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " patch grid");
  }
  Tensor y({s[0] * rows * cols, s[1], s[2] / rows, s[3] / cols});
  kernels::regroup_patches<true>(x.value(), y, rows, cols);
  return x.tape->push("split_patches", std::move(y), {x}, [x, rows, cols](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor whole(x.shape());
    kernels::regroup_patches<false>(dy, whole, rows, cols);
    detail::accumulate(x, whole);
  });
}

/// Inverse of split_patches.
inline Var merge_patches(Var x, std::size_t rows, std::size_t cols) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[0] % (rows * cols) != 0) {
    throw DimensionError("cannot merge " + shape_string(s) + " from a " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " patch grid");
  }
  Tensor y({s[0] / (rows * cols), s[1], s[2] * rows, s[3] * cols});
  kernels::regroup_patches<false>(x.value(), y, rows, cols);
  return x.tape->push("merge_patches", std::move(y), {x}, [x, rows, cols](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor parts(x.shape());
    kernels::regroup_patches<true>(dy, parts, rows, cols);
    detail::accumulate(x, parts);
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting over extent-1 axes.

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const kernels::BroadcastPlan p = kernels::plan_broadcast(a.shape(), b.shape());
  Tensor y(p.out_shape);
  const Tensor &av = a.value(), &bv = b.value();
  kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = av[ia] + bv[ib]; });
  return t.push("add", std::move(y), {a, b}, [a, b](const Tensor& dy) {
    if (a.tape->requires_grad(a)) detail::accumulate(a, kernels::reduce_to_shape(dy, a.shape()));
    if (b.tape->requires_grad(b)) detail::accumulate(b, kernels::reduce_to_shape(dy, b.shape()));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const kernels::BroadcastPlan p = kernels::plan_broadcast(a.shape(), b.shape());
  Tensor y(p.out_shape);
  const Tensor &av = a.value(), &bv = b.value();
  kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = av[ia] - bv[ib]; });
  return t.push("sub", std::move(y), {a, b}, [a, b](const Tensor& dy) {
    if (a.tape->requires_grad(a)) detail::accumulate(a, kernels::reduce_to_shape(dy, a.shape()));
    if (b.tape->requires_grad(b)) {
      Tensor g = kernels::reduce_to_shape(dy, b.shape());
      for (double& v : g.values()) v = -v;
      detail::accumulate(b, g);
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const kernels::BroadcastPlan p = kernels::plan_broadcast(a.shape(), b.shape());
  Tensor y(p.out_shape);
  const Tensor &av = a.value(), &bv = b.value();
  kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = av[ia] * bv[ib]; });
  return t.push("mul", std::move(y), {a, b}, [a, b, p](const Tensor& dy) {
    const Tensor &av = a.value(), &bv = b.value();
    if (a.tape->requires_grad(a)) {
      Tensor& ga = a.tape->grad(a);
      kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += dy[o] * bv[ib]; });
    }
    if (b.tape->requires_grad(b)) {
      Tensor& gb = b.tape->grad(b);
      kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] += dy[o] * av[ia]; });
    }
  });
}

inline Var scale(Var x, double s) {
  Tensor y = detail::map(x.value(), [s](double v) { return v * s; });
  return x.tape->push("scale", std::move(y), {x}, [x, s](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor& g = x.tape->grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += s * dy[i];
  });
}

inline Var add_scalar(Var x, double s) {
  Tensor y = detail::map(x.value(), [s](double v) { return v + s; });
  return x.tape->push("add_scalar", std::move(y), {x}, [x](const Tensor& dy) { detail::accumulate(x, dy); });
}

/// 1 - x.
inline Var one_minus(Var x) { return add_scalar(scale(x, -1.0), 1.0); }

// ---------------------------------------------------------------------------
// Activations.

inline double sigmoid_value(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

/// The Var the next push() on `t` will return; lets backward closures refer
/// to their own output.
inline Var next_var(Tape& t) { return Var{&t, t.size()}; }

inline Var sigmoid(Var x) {
  const Var out = next_var(*x.tape);
  return x.tape->push("sigmoid", detail::map(x.value(), sigmoid_value), {x}, [x, out](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    const Tensor& y = out.value();
    Tensor& g = x.tape->grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var tanh(Var x) {
  const Var out = next_var(*x.tape);
  return x.tape->push("tanh", detail::map(x.value(), [](double v) { return std::tanh(v); }), {x},
                      [x, out](const Tensor& dy) {
                        if (!x.tape->requires_grad(x)) return;
                        const Tensor& y = out.value();
                        Tensor& g = x.tape->grad(x);
                        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * (1.0 - y[i] * y[i]);
                      });
}

inline Var relu(Var x) {
  return x.tape->push("relu", detail::map(x.value(), [](double v) { return v > 0 ? v : 0.0; }), {x},
                      [x](const Tensor& dy) {
                        if (!x.tape->requires_grad(x)) return;
                        const Tensor& xv = x.value();
                        Tensor& g = x.tape->grad(x);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          if (xv[i] > 0) g[i] += dy[i];
                      });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Var sum(Var x, std::vector<std::size_t> axes) {
  Tensor y = kernels::sum_axes(x.value(), axes);
  return x.tape->push("sum", std::move(y), {x}, [x](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor& g = x.tape->grad(x);
    const kernels::BroadcastPlan p = kernels::plan_broadcast(x.shape(), dy.shape());
    kernels::for_each_broadcast(p, [&](std::size_t o, std::size_t, std::size_t ib) { g[o] += dy[ib]; });
  });
}

inline Var mean(Var x, std::vector<std::size_t> axes) {
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.shape().at(a);
  return scale(sum(x, std::move(axes)), 1.0 / static_cast<double>(count));
}

/// Sum over every element, shape [1].
inline Var sum_all(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->push("sum_all", Tensor({1}, s), {x}, [x](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    Tensor& g = x.tape->grad(x);
    for (double& v : g.values()) v += dy[0];
  });
}

/// Global sum pooling over H and W of an NCHW tensor (keepdim).
inline Var global_sum_pool(Var x) { return sum(x, {2, 3}); }

/// Global average pooling over H and W of an NCHW tensor (keepdim).
inline Var global_avg_pool(Var x) { return mean(x, {2, 3}); }

// ---------------------------------------------------------------------------
// Linear algebra.

/// Product of rank-2 [m,k]x[k,n] or batched rank-3 [B,m,k]x[B,k,n] operands,
/// with optional transposition of the trailing two axes.
inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
  Tape& t = detail::same_tape(a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3) || (sa.size() == 3 && sa[0] != sb[0])) {
    throw DimensionError("matmul expects matching rank-2 or batched rank-3 operands, got " + shape_string(sa) +
                         " and " + shape_string(sb));
  }
  const bool batched = sa.size() == 3;
  const std::size_t batch = batched ? sa[0] : 1, o = batched ? 1 : 0;
  const std::size_t m = trans_a ? sa[o + 1] : sa[o], k = trans_a ? sa[o] : sa[o + 1];
  const std::size_t kb = trans_b ? sb[o + 1] : sb[o], n = trans_b ? sb[o] : sb[o + 1];
  if (k != kb) {
    throw DimensionError("matmul inner extents differ: " + shape_string(sa) + " x " + shape_string(sb));
  }
  Tensor y(batched ? Shape{batch, m, n} : Shape{m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    blas::gemm(trans_a, trans_b, m, n, k, 1.0, a.value().data() + i * m * k, b.value().data() + i * k * n, 0.0,
               y.data() + i * m * n);
  }
  return t.push("matmul", std::move(y), {a, b}, [a, b, trans_a, trans_b, batch, m, n, k](const Tensor& dy) {
    for (std::size_t i = 0; i < batch; ++i) {
      const double* g = dy.data() + i * m * n;
      if (a.tape->requires_grad(a)) {
        double* ga = a.tape->grad(a).data() + i * m * k;
        const double* bv = b.value().data() + i * k * n;
        // d op(A) = dY op(B)^T
        if (trans_a) {
          blas::gemm(trans_b, true, k, m, n, 1.0, bv, g, 1.0, ga);
        } else {
          blas::gemm(false, !trans_b, m, k, n, 1.0, g, bv, 1.0, ga);
        }
      }
      if (b.tape->requires_grad(b)) {
        double* gb = b.tape->grad(b).data() + i * k * n;
        const double* av = a.value().data() + i * m * k;
        // d op(B) = op(A)^T dY
        if (trans_b) {
          blas::gemm(true, trans_a, n, k, m, 1.0, g, av, 1.0, gb);
        } else {
          blas::gemm(!trans_a, false, k, n, m, 1.0, av, g, 1.0, gb);
        }
      }
    }
  });
}

inline Var softmax(Var x, std::size_t axis) {
  const Var out = next_var(*x.tape);
  return x.tape->push("softmax", kernels::softmax(x.value(), axis), {x}, [x, out, axis](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    kernels::softmax_backward(out.value(), dy, axis, x.tape->grad(x));
  });
}

// ---------------------------------------------------------------------------
// Convolution, sampling, resampling.

inline Var conv2d(Var x, Var w, std::optional<Var> bias = std::nullopt, std::size_t stride = 1,
                  Padding mode = Padding::zero) {
  Tape& t = detail::same_tape(x, w);
  Tensor y = kernels::conv2d(x.value(), w.value(), bias ? &bias->value() : nullptr, stride, mode);
  auto backward = [x, w, bias, stride, mode](const Tensor& dy) {
    Tensor* dx = x.tape->requires_grad(x) ? &x.tape->grad(x) : nullptr;
    Tensor* dw = w.tape->requires_grad(w) ? &w.tape->grad(w) : nullptr;
    Tensor* db = bias && bias->tape->requires_grad(*bias) ? &bias->tape->grad(*bias) : nullptr;
    kernels::conv2d_backward(x.value(), w.value(), stride, mode, dy, dx, dw, db);
  };
  if (bias) return t.push("conv2d", std::move(y), {x, w, *bias}, backward);
  return t.push("conv2d", std::move(y), {x, w}, backward);
}

/// Samples x [N,C,H,W] at absolute (row, col) coordinates [N,2,H',W'].
inline Var bilinear_sample(Var x, Var coords) {
  Tape& t = detail::same_tape(x, coords);
  return t.push("bilinear_sample", kernels::bilinear_sample(x.value(), coords.value()), {x, coords},
                [x, coords](const Tensor& dy) {
                  Tensor* dx = x.tape->requires_grad(x) ? &x.tape->grad(x) : nullptr;
                  Tensor* dc = coords.tape->requires_grad(coords) ? &coords.tape->grad(coords) : nullptr;
                  kernels::bilinear_sample_backward(x.value(), coords.value(), dy, dx, dc);
                });
}

inline Var upsample2x(Var x) {
  if (x.shape().size() != 4) throw DimensionError("upsample2x expects NCHW input");
  return x.tape->push("upsample2x", kernels::upsample2x(x.value()), {x}, [x](const Tensor& dy) {
    if (!x.tape->requires_grad(x)) return;
    kernels::upsample2x_backward(dy, x.tape->grad(x));
  });
}

// ---------------------------------------------------------------------------
// Losses (scalar outputs of shape [1]).

inline Var mse_loss(Var prediction, Var target) {
  Var d = sub(prediction, target);
  return scale(sum_all(mul(d, d)), 1.0 / static_cast<double>(d.value().size()));
}

inline Var l1_loss(Var prediction, Var target) {
  Tape& t = detail::same_tape(prediction, target);
  if (prediction.shape() != target.shape()) throw DimensionError("l1_loss shape mismatch");
  const Tensor &p = prediction.value(), &q = target.value();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  const double inv = 1.0 / static_cast<double>(p.size());
  return t.push("l1_loss", Tensor({1}, s * inv), {prediction, target}, [prediction, target, inv](const Tensor& dy) {
    const Tensor &p = prediction.value(), &q = target.value();
    const bool gp = prediction.tape->requires_grad(prediction), gq = target.tape->requires_grad(target);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - q[i];
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (gp) prediction.tape->grad(prediction)[i] += dy[0] * inv * sgn;
      if (gq) target.tape->grad(target)[i] -= dy[0] * inv * sgn;
    }
  });
}

}  // namespace cadeblur::ops
