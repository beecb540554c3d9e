#pragma once

// Tape-free numerical kernels. The differentiable ops in ops.hpp are thin
// wrappers that call into these and record the matching backward kernels.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cadeblur/core/gemm.hpp"
#include "cadeblur/core/parallel.hpp"
#include "cadeblur/core/tensor.hpp"

namespace cadeblur::kernels {

enum class Padding { zero, reflect };

// ---------------------------------------------------------------------------
// Broadcasting over axes of extent 1 (operands of equal rank, rank <= 4).

struct BroadcastPlan {
  std::array<std::size_t, 4> out{1, 1, 1, 1};
  std::array<std::size_t, 4> stride_a{0, 0, 0, 0};
  std::array<std::size_t, 4> stride_b{0, 0, 0, 0};
  Shape out_shape;
};

inline std::array<std::size_t, 4> padded4(const Shape& s) {
  if (s.size() > 4) throw DimensionError("broadcasting supports rank <= 4, got " + shape_string(s));
  std::array<std::size_t, 4> p{1, 1, 1, 1};
  std::copy(s.begin(), s.end(), p.begin() + static_cast<std::ptrdiff_t>(4 - s.size()));
  return p;
}

inline std::array<std::size_t, 4> strides4(const std::array<std::size_t, 4>& p) {
  return {p[1] * p[2] * p[3], p[2] * p[3], p[3], 1};
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("broadcast requires equal rank: " + shape_string(a) + " vs " + shape_string(b));
  }
  BroadcastPlan plan;
  const auto pa = padded4(a), pb = padded4(b);
  const auto sa = strides4(pa), sb = strides4(pb);
  for (std::size_t i = 0; i < 4; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("incompatible broadcast shapes " + shape_string(a) + " and " + shape_string(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
    plan.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    plan.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  for (std::size_t i = 0; i < a.size(); ++i) plan.out_shape.push_back(std::max(a[i], b[i]));
  return plan;
}

/// Visits every output element with the linear offsets of both operands.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < p.out[0]; ++i0)
    for (std::size_t i1 = 0; i1 < p.out[1]; ++i1)
      for (std::size_t i2 = 0; i2 < p.out[2]; ++i2) {
        std::size_t ia = i0 * p.stride_a[0] + i1 * p.stride_a[1] + i2 * p.stride_a[2];
        std::size_t ib = i0 * p.stride_b[0] + i1 * p.stride_b[1] + i2 * p.stride_b[2];
        for (std::size_t i3 = 0; i3 < p.out[3]; ++i3, ++o) {
          fn(o, ia, ib);
          ia += p.stride_a[3];
          ib += p.stride_b[3];
        }
      }
}

/// Sums `grad` (shaped like the broadcast output) down to `target` shape.
inline Tensor reduce_to_shape(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  Tensor out(target);
  const BroadcastPlan p = plan_broadcast(grad.shape(), target);
  for_each_broadcast(p, [&](std::size_t o, std::size_t, std::size_t ib) { out[ib] += grad[o]; });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions over an arbitrary axis set (keepdim semantics).

inline Shape reduced_shape(const Shape& s, const std::vector<std::size_t>& axes) {
  Shape out = s;
  for (std::size_t a : axes) {
    if (a >= s.size()) throw DimensionError("reduction axis " + std::to_string(a) + " out of range");
    out[a] = 1;
  }
  return out;
}

inline Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
  Tensor out(reduced_shape(x.shape(), axes));
  const BroadcastPlan p = plan_broadcast(x.shape(), out.shape());
  for_each_broadcast(p, [&](std::size_t o, std::size_t, std::size_t ib) { out[ib] += x[o]; });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax along one axis, max-shifted.

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double m = x[base];
      for (std::size_t k = 1; k < sp.extent; ++k) m = std::max(m, x[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(x[base + k * sp.inner] - m);
        y[base + k * sp.inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t k = 0; k < sp.extent; ++k) y[base + k * sp.inner] *= inv;
    }
  }
  return y;
}

/// dx = y * (dy - sum(dy * y)) along the axis.
inline void softmax_backward(const Tensor& y, const Tensor& dy, std::size_t axis, Tensor& dx) {
  const AxisSplit sp = split_axis(y.shape(), axis);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double dot = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) dot += dy[base + k * sp.inner] * y[base + k * sp.inner];
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const std::size_t idx = base + k * sp.inner;
        dx[idx] += y[idx] * (dy[idx] - dot);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, NCHW, square odd kernels).

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;

  std::size_t col_rows() const { return cin * k * k; }
  std::size_t col_cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride) {
  if (x.size() != 4 || w.size() != 4) {
    throw DimensionError("conv2d expects NCHW input and OIKK weight, got " + shape_string(x) + " and " +
                         shape_string(w));
  }
  if (w[2] != w[3]) throw ConfigError("conv2d kernel must be square, got " + shape_string(w));
  if (w[2] % 2 == 0) throw ConfigError("conv2d kernel size must be odd, got " + std::to_string(w[2]));
  if (w[1] != x[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(x) + ", weight " + shape_string(w));
  }
  if (stride == 0) throw ConfigError("conv2d stride must be >= 1");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, (w[2] - 1) / 2, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;
  return g;
}

/// Maps a possibly out-of-range index into [0, n), or -1 for zero padding.
inline std::ptrdiff_t padded_index(std::ptrdiff_t i, std::ptrdiff_t n, Padding mode) {
  if (i >= 0 && i < n) return i;
  if (mode == Padding::zero) return -1;
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline void im2col(const double* x, const ConvGeometry& g, Padding mode, double* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = padded_index(
              static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad, static_cast<std::ptrdiff_t>(g.h), mode);
          double* out = row + oy * g.wo;
          if (iy < 0) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = padded_index(static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad,
                                                   static_cast<std::ptrdiff_t>(g.w), mode);
            out[ox] = ix < 0 ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates column gradients into dx.
inline void col2im(const double* cols, const ConvGeometry& g, Padding mode, double* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* dxc = dx + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = padded_index(
              static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad, static_cast<std::ptrdiff_t>(g.h), mode);
          if (iy < 0) continue;
          double* dst = dxc + static_cast<std::size_t>(iy) * g.w;
          const double* in = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = padded_index(static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad,
                                                   static_cast<std::ptrdiff_t>(g.w), mode);
            if (ix >= 0) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride, Padding mode) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride);
  if (bias && bias->size() != g.cout) throw DimensionError("conv2d bias length must equal output channels");
  Tensor y({g.n, g.cout, g.ho, g.wo});
  const std::size_t in_plane = g.cin * g.h * g.w;
  const std::size_t out_plane = g.cout * g.ho * g.wo;
  parallel_for(g.n, [&](std::size_t n) {
    double* yn = y.data() + n * out_plane;
    const double* xn = x.data() + n * in_plane;
    if (g.pointwise()) {
      blas::gemm(false, false, g.cout, g.col_cols(), g.col_rows(), 1.0, w.data(), xn, 0.0, yn);
    } else {
      std::vector<double> cols(g.col_rows() * g.col_cols());
      AllocationAudit::note(cols.size());
      im2col(xn, g, mode, cols.data());
      blas::gemm(false, false, g.cout, g.col_cols(), g.col_rows(), 1.0, w.data(), cols.data(), 0.0, yn);
    }
    if (bias) {
      const std::size_t plane = g.ho * g.wo;
      for (std::size_t o = 0; o < g.cout; ++o) {
        const double b = (*bias)[o];
        double* row = yn + o * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += b;
      }
    }
  });
  return y;
}

/// Accumulates gradients. Any of dx, dw, db may be null. Weight and bias
/// gradients are reduced over the batch in index order, so the result does
/// not depend on the thread count.
inline void conv2d_backward(const Tensor& x, const Tensor& w, std::size_t stride, Padding mode, const Tensor& dy,
                            Tensor* dx, Tensor* dw, Tensor* db) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride);
  const std::size_t in_plane = g.cin * g.h * g.w;
  const std::size_t out_plane = g.cout * g.ho * g.wo;
  const std::size_t wsize = w.size();
  std::vector<std::vector<double>> dw_parts(dw ? g.n : 0);
  parallel_for(g.n, [&](std::size_t n) {
    const double* dyn = dy.data() + n * out_plane;
    const double* xn = x.data() + n * in_plane;
    std::vector<double> cols;
    if (dw) {
      dw_parts[n].assign(wsize, 0.0);
      const double* colp = xn;
      if (!g.pointwise()) {
        cols.resize(g.col_rows() * g.col_cols());
        im2col(xn, g, mode, cols.data());
        colp = cols.data();
      }
      blas::gemm(false, true, g.cout, g.col_rows(), g.col_cols(), 1.0, dyn, colp, 0.0, dw_parts[n].data());
    }
    if (dx) {
      double* dxn = dx->data() + n * in_plane;
      if (g.pointwise()) {
        blas::gemm(true, false, g.col_rows(), g.col_cols(), g.cout, 1.0, w.data(), dyn, 1.0, dxn);
      } else {
        cols.assign(g.col_rows() * g.col_cols(), 0.0);
        blas::gemm(true, false, g.col_rows(), g.col_cols(), g.cout, 1.0, w.data(), dyn, 0.0, cols.data());
        col2im(cols.data(), g, mode, dxn);
      }
    }
  });
  if (dw) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t i = 0; i < wsize; ++i) (*dw)[i] += dw_parts[n][i];
  }
  if (db) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.cout; ++o) {
        const double* row = dy.data() + n * out_plane + o * plane;
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += row[i];
        (*db)[o] += s;
      }
  }
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero contribution from out-of-range neighbours.

/// Corner indices (-1 when outside), interpolation weights, and the weight
/// derivatives with respect to the row and column coordinate.
struct BilinearTap {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};
  std::array<double, 4> weight{};
  std::array<double, 4> d_row{};
  std::array<double, 4> d_col{};

  double sample(const double* plane) const {
    double s = 0.0;
    for (int i = 0; i < 4; ++i)
      if (index[i] >= 0) s += weight[i] * plane[index[i]];
    return s;
  }
};

inline BilinearTap bilinear_tap(double row, double col, std::size_t h, std::size_t w) {
  BilinearTap t;
  const double r0f = std::floor(row), c0f = std::floor(col);
  const double fr = row - r0f, fc = col - c0f;
  const auto r0 = static_cast<std::ptrdiff_t>(r0f), c0 = static_cast<std::ptrdiff_t>(c0f);
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
  const std::ptrdiff_t rr[4] = {r0, r0, r0 + 1, r0 + 1};
  const std::ptrdiff_t cc[4] = {c0, c0 + 1, c0, c0 + 1};
  t.weight = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
  t.d_row = {-(1 - fc), -fc, 1 - fc, fc};
  t.d_col = {-(1 - fr), 1 - fr, -fr, fr};
  for (int i = 0; i < 4; ++i) {
    if (rr[i] >= 0 && rr[i] < hh && cc[i] >= 0 && cc[i] < ww) t.index[i] = rr[i] * ww + cc[i];
  }
  return t;
}

/// x: [N,C,H,W], coords: [N,2,Ho,Wo] absolute (row, col) positions.
inline Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
  if (x.rank() != 4 || coords.rank() != 4 || coords.dim(1) != 2 || coords.dim(0) != x.dim(0)) {
    throw DimensionError("bilinear_sample expects x [N,C,H,W] and coords [N,2,H',W'], got " +
                         shape_string(x.shape()) + " and " + shape_string(coords.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = coords.dim(2), wo = coords.dim(3), plane = ho * wo;
  Tensor y({n, c, ho, wo});
  for (std::size_t b = 0; b < n; ++b) {
    const double* rows = coords.data() + b * 2 * plane;
    const double* cols = rows + plane;
    for (std::size_t j = 0; j < plane; ++j) {
      const BilinearTap t = bilinear_tap(rows[j], cols[j], h, w);
      for (std::size_t ch = 0; ch < c; ++ch) y[(b * c + ch) * plane + j] = t.sample(x.data() + (b * c + ch) * h * w);
    }
  }
  return y;
}

inline void bilinear_sample_backward(const Tensor& x, const Tensor& coords, const Tensor& dy, Tensor* dx,
                                     Tensor* dcoords) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = coords.dim(2) * coords.dim(3);
  for (std::size_t b = 0; b < n; ++b) {
    const double* rows = coords.data() + b * 2 * plane;
    const double* cols = rows + plane;
    for (std::size_t j = 0; j < plane; ++j) {
      const BilinearTap t = bilinear_tap(rows[j], cols[j], h, w);
      double gr = 0.0, gc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = dy[(b * c + ch) * plane + j];
        const std::size_t base = (b * c + ch) * h * w;
        for (int i = 0; i < 4; ++i) {
          if (t.index[i] < 0) continue;
          if (dx) (*dx)[base + static_cast<std::size_t>(t.index[i])] += g * t.weight[i];
          const double v = x[base + static_cast<std::size_t>(t.index[i])];
          gr += g * t.d_row[i] * v;
          gc += g * t.d_col[i] * v;
        }
      }
      if (dcoords) {
        (*dcoords)[b * 2 * plane + j] += gr;
        (*dcoords)[b * 2 * plane + plane + j] += gc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Bilinear x2 upsampling (align_corners = false, edge clamped).

inline void upsample_source(std::size_t o, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
  double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
  if (s < 0) s = 0;
  i0 = static_cast<std::size_t>(std::floor(s));
  if (i0 >= n) i0 = n - 1;
  i1 = std::min(i0 + 1, n - 1);
  f = s - static_cast<double>(i0);
}

inline Tensor upsample2x(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * 4 * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      std::size_t y0, y1;
      double fy;
      upsample_source(oy, h, y0, y1, fy);
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        std::size_t x0, x1;
        double fx;
        upsample_source(ox, w, x0, x1, fx);
        dst[oy * 2 * w + ox] = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                               fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      }
    }
  }
  return y;
}

inline void upsample2x_backward(const Tensor& dy, Tensor& dx) {
  const std::size_t n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  for (std::size_t p = 0; p < n * c; ++p) {
    double* dst = dx.data() + p * h * w;
    const double* g = dy.data() + p * 4 * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      std::size_t y0, y1;
      double fy;
      upsample_source(oy, h, y0, y1, fy);
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        std::size_t x0, x1;
        double fx;
        upsample_source(ox, w, x0, x1, fx);
        const double v = g[oy * 2 * w + ox];
        dst[y0 * w + x0] += v * (1 - fy) * (1 - fx);
        dst[y0 * w + x1] += v * (1 - fy) * fx;
        dst[y1 * w + x0] += v * fy * (1 - fx);
        dst[y1 * w + x1] += v * fy * fx;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Patch regrouping: [N,C,H,W] <-> [N*rows*cols, C, H/rows, W/cols].
// Patch order within an image is row-major over the grid.

template <bool Split>
void regroup_patches(const Tensor& src, Tensor& dst, std::size_t rows, std::size_t cols) {
  const Tensor& whole = Split ? src : dst;
  const std::size_t n = whole.dim(0), c = whole.dim(1), h = whole.dim(2), w = whole.dim(3);
  const std::size_t ph = h / rows, pw = w / cols;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gr = 0; gr < rows; ++gr)
      for (std::size_t gc = 0; gc < cols; ++gc) {
        const std::size_t pb = (b * rows + gr) * cols + gc;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < ph; ++y) {
            const std::size_t wi = ((b * c + ch) * h + gr * ph + y) * w + gc * pw;
            const std::size_t pi = ((pb * c + ch) * ph + y) * pw;
            if constexpr (Split) {
              std::copy_n(src.data() + wi, pw, dst.data() + pi);
            } else {
              std::copy_n(src.data() + pi, pw, dst.data() + wi);
            }
          }
      }
}

}  // namespace cadeblur::kernels
