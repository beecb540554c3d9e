#pragma once

// Pixel-dependent filtering.
//
//   y[c, j] = sum_k V[k, j] * sum_c' W[c, c', k] * x[c', j + g_k + d_k(j)]
//
// g_k walks the K x K dilation-1 grid, V holds one K^2 kernel per pixel
// (shared by all channels), W is a learned C x C x K x K weight and d_k(j) a
// per-pixel, per-tap offset bounded by delta_max. Fractional positions are
// read with bilinear interpolation, zero outside the image.
//
// Offset layout: channel 2k is the row offset of tap k, channel 2k + 1 the
// column offset. Taps are numbered row-major over the grid.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cadeblur/core/gemm.hpp"
#include "cadeblur/core/ops.hpp"
#include "cadeblur/core/parameters.hpp"

namespace cadeblur {

enum class OffsetMode {
  dynamic,  // generated per pixel from the input
  learned,  // one learned offset per tap, shared by all pixels
};

struct PDFConfig {
  std::size_t channels = 32;
  std::size_t kernel = 5;
  double delta_max = 8.0;
  OffsetMode offsets = OffsetMode::dynamic;

  std::size_t taps() const { return kernel * kernel; }
};

struct PDFParams {
  PDFConfig config;
  Parameter* weight = nullptr;  // [C, C, K, K]
  ConvLayer kernel_gen;         // 1x1, C -> K^2
  ConvLayer offset_gen;         // 1x1, C -> 2K^2 (dynamic mode)
  Parameter* learned_offsets = nullptr;  // [1, 2K^2, 1, 1] (learned mode)
};

inline void validate(const PDFConfig& cfg) {
  if (cfg.kernel % 2 == 0) throw ConfigError("PDF kernel size must be odd, got " + std::to_string(cfg.kernel));
  if (!(cfg.delta_max >= 0.0)) throw ConfigError("PDF delta_max must be >= 0");
  if (cfg.channels == 0) throw ConfigError("PDF needs at least one channel");
}

inline PDFParams make_pdf(ParameterStore& store, const std::string& prefix, PDFConfig cfg, std::mt19937_64& rng) {
  validate(cfg);
  const std::size_t c = cfg.channels, kk = cfg.taps();
  PDFParams p;
  p.config = cfg;
  p.weight = &store.create(prefix + ".weight", scaled_normal({c, c, cfg.kernel, cfg.kernel}, c * kk, std::sqrt(2.0), rng));
  // Kernels start close to 1 and offsets at 0: the module begins as a plain
  // convolution with `weight`.
  p.kernel_gen = make_conv(store, prefix + ".kernel_gen", c, kk, 1, rng, ConvInit{0.1, 1.0});
  if (cfg.offsets == OffsetMode::dynamic) {
    p.offset_gen = make_conv(store, prefix + ".offset_gen", c, 2 * kk, 1, rng, ConvInit{0.0, 0.0});
  } else {
    p.learned_offsets = &store.create(prefix + ".offsets", Tensor({1, 2 * kk, 1, 1}));
  }
  return p;
}

namespace kernels {

struct PDFGeometry {
  std::size_t n, c, h, w, k;
  std::size_t taps() const { return k * k; }
  std::size_t plane() const { return h * w; }
};

inline PDFGeometry pdf_geometry(const Shape& x, const Shape& v, const Shape& delta, const Shape& weight) {
  if (x.size() != 4 || weight.size() != 4 || weight[2] != weight[3] || weight[2] % 2 == 0) {
    throw DimensionError("pdf_apply expects x [N,C,H,W] and weight [C,C,K,K] with odd K");
  }
  PDFGeometry g{x[0], x[1], x[2], x[3], weight[2]};
  const Shape vs{g.n, g.taps(), g.h, g.w}, ds{g.n, 2 * g.taps(), g.h, g.w};
  if (weight[0] != g.c || weight[1] != g.c || v != vs || delta != ds) {
    throw DimensionError("pdf_apply shape mismatch: x " + shape_string(x) + ", V " + shape_string(v) +
                         ", offsets " + shape_string(delta) + ", weight " + shape_string(weight));
  }
  return g;
}

/// Pixels per block. A block's column matrix is C*K^2 x kPDFTile.
constexpr std::size_t kPDFTile = 64;

/// Bilinear read position in an image padded by one zero pixel on every
/// side: the top-left corner `base` and the fractional parts. Positions
/// whose four corners all lie outside the image read the zero corner.
struct PDFTap {
  std::size_t base;
  double fr, fc;
};

struct PaddedPlanes {
  std::size_t hp, wp;
  std::vector<double> data;  // [C, H+2, W+2]

  PaddedPlanes(const double* x, std::size_t c, std::size_t h, std::size_t w)
      : hp(h + 2), wp(w + 2), data(c * (h + 2) * (w + 2), 0.0) {
    AllocationAudit::note(data.size());
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < h; ++i)
        std::copy_n(x + (ci * h + i) * w, w, data.begin() + static_cast<std::ptrdiff_t>((ci * hp + i + 1) * wp + 1));
  }
  std::size_t plane() const { return hp * wp; }
};

inline PDFTap pdf_tap(double row, double col, std::size_t h, std::size_t w, std::size_t wp) {
  const double r0 = std::floor(row), c0 = std::floor(col);
  if (!(r0 >= -1.0 && r0 <= static_cast<double>(h) - 1.0 && c0 >= -1.0 && c0 <= static_cast<double>(w) - 1.0)) {
    return {0, 0.0, 0.0};
  }
  const auto pr = static_cast<std::size_t>(r0 + 1.0), pc = static_cast<std::size_t>(c0 + 1.0);
  return {pr * wp + pc, row - r0, col - c0};
}

/// Taps of pixels [p0, p0 + n) for every grid tap k, laid out [k, n].
inline void pdf_taps(const PDFGeometry& g, const double* delta, std::size_t p0, std::size_t n, std::size_t wp,
                     PDFTap* taps) {
  const std::size_t plane = g.plane();
  const auto r = static_cast<double>((g.k - 1) / 2);
  for (std::size_t k = 0; k < g.taps(); ++k) {
    const double gy = static_cast<double>(k / g.k) - r, gx = static_cast<double>(k % g.k) - r;
    const double* dr = delta + 2 * k * plane;
    const double* dc = dr + plane;
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t p = p0 + q;
      const double i = static_cast<double>(p / g.w), j = static_cast<double>(p % g.w);
      taps[k * n + q] = pdf_tap(i + gy + dr[p], j + gx + dc[p], g.h, g.w, wp);
    }
  }
}

inline double tap_sample(const double* xp, std::size_t wp, const PDFTap& t) {
  const double* a = xp + t.base;
  return (1 - t.fr) * ((1 - t.fc) * a[0] + t.fc * a[1]) + t.fr * ((1 - t.fc) * a[wp] + t.fc * a[wp + 1]);
}

/// cols[(c', k), q] = V[k, p0 + q] * sample(x[c'], tap k at p0 + q); raw samples optional.
inline void pdf_columns(const PDFGeometry& g, const PaddedPlanes& xp, const double* v, const PDFTap* taps,
                        std::size_t p0, std::size_t n, double* samples, double* cols) {
  const std::size_t plane = g.plane(), kk = g.taps();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const double* xc = xp.data.data() + ci * xp.plane();
    for (std::size_t k = 0; k < kk; ++k) {
      const std::size_t row = (ci * kk + k) * n;
      const PDFTap* tk = taps + k * n;
      const double* vk = v + k * plane + p0;
      for (std::size_t q = 0; q < n; ++q) {
        const double s = tap_sample(xc, xp.wp, tk[q]);
        if (samples) samples[row + q] = s;
        cols[row + q] = vk[q] * s;
      }
    }
  }
}

inline Tensor pdf_forward(const Tensor& x, const Tensor& v, const Tensor& delta, const Tensor& weight) {
  const PDFGeometry g = pdf_geometry(x.shape(), v.shape(), delta.shape(), weight.shape());
  const std::size_t plane = g.plane(), kk = g.taps(), rows = g.c * kk;
  Tensor y({g.n, g.c, g.h, g.w});
  parallel_for(g.n, [&](std::size_t b) {
    const PaddedPlanes xp(x.data() + b * g.c * plane, g.c, g.h, g.w);
    const double* vb = v.data() + b * kk * plane;
    const double* db = delta.data() + b * 2 * kk * plane;
    std::vector<PDFTap> taps(kk * kPDFTile);
    std::vector<double> cols(rows * kPDFTile);
    AllocationAudit::note(cols.size());
    for (std::size_t p0 = 0; p0 < plane; p0 += kPDFTile) {
      const std::size_t n = std::min(kPDFTile, plane - p0);
      pdf_taps(g, db, p0, n, xp.wp, taps.data());
      pdf_columns(g, xp, vb, taps.data(), p0, n, nullptr, cols.data());
      blas::gemm(false, false, g.c, n, rows, 1.0, weight.data(), rows, cols.data(), n, 0.0,
                 y.data() + b * g.c * plane + p0, plane);
    }
  });
  return y;
}

inline void pdf_backward(const Tensor& x, const Tensor& v, const Tensor& delta, const Tensor& weight, const Tensor& dy,
                         Tensor* dx, Tensor* dv, Tensor* ddelta, Tensor* dweight) {
  const PDFGeometry g = pdf_geometry(x.shape(), v.shape(), delta.shape(), weight.shape());
  const std::size_t plane = g.plane(), kk = g.taps(), rows = g.c * kk;
  std::vector<std::vector<double>> dw_parts(dweight ? g.n : 0);
  parallel_for(g.n, [&](std::size_t b) {
    const PaddedPlanes xp(x.data() + b * g.c * plane, g.c, g.h, g.w);
    const double* vb = v.data() + b * kk * plane;
    const double* db = delta.data() + b * 2 * kk * plane;
    const double* dyb = dy.data() + b * g.c * plane;
    double* dvb = dv ? dv->data() + b * kk * plane : nullptr;
    double* ddb = ddelta ? ddelta->data() + b * 2 * kk * plane : nullptr;
    std::vector<double> dxp(dx ? xp.data.size() : 0, 0.0);
    if (dweight) dw_parts[b].assign(weight.size(), 0.0);
    std::vector<PDFTap> taps(kk * kPDFTile);
    std::vector<double> samples(rows * kPDFTile), cols(rows * kPDFTile), dcols(rows * kPDFTile);
    for (std::size_t p0 = 0; p0 < plane; p0 += kPDFTile) {
      const std::size_t n = std::min(kPDFTile, plane - p0);
      pdf_taps(g, db, p0, n, xp.wp, taps.data());
      pdf_columns(g, xp, vb, taps.data(), p0, n, samples.data(), cols.data());
      if (dweight) {
        blas::gemm(false, true, g.c, rows, n, 1.0, dyb + p0, plane, cols.data(), n, 1.0, dw_parts[b].data(), rows);
      }
      if (!dx && !dv && !ddelta) continue;
      blas::gemm(true, false, rows, n, g.c, 1.0, weight.data(), rows, dyb + p0, plane, 0.0, dcols.data(), n);
      for (std::size_t ci = 0; ci < g.c; ++ci) {
        const double* xc = xp.data.data() + ci * xp.plane();
        double* dxc = dx ? dxp.data() + ci * xp.plane() : nullptr;
        for (std::size_t k = 0; k < kk; ++k) {
          const std::size_t row = (ci * kk + k) * n;
          const PDFTap* tk = taps.data() + k * n;
          const double* vk = vb + k * plane + p0;
          double* dvk = dvb ? dvb + k * plane + p0 : nullptr;
          double* drk = ddb ? ddb + 2 * k * plane + p0 : nullptr;
          double* dck = ddb ? ddb + (2 * k + 1) * plane + p0 : nullptr;
          for (std::size_t q = 0; q < n; ++q) {
            const double gcol = dcols[row + q];
            if (dvk) dvk[q] += gcol * samples[row + q];
            const double gs = gcol * vk[q];
            const PDFTap& t = tk[q];
            const double* a = xc + t.base;
            if (dxc) {
              double* d = dxc + t.base;
              d[0] += gs * (1 - t.fr) * (1 - t.fc);
              d[1] += gs * (1 - t.fr) * t.fc;
              d[xp.wp] += gs * t.fr * (1 - t.fc);
              d[xp.wp + 1] += gs * t.fr * t.fc;
            }
            if (drk) {
              drk[q] += gs * ((1 - t.fc) * (a[xp.wp] - a[0]) + t.fc * (a[xp.wp + 1] - a[1]));
              dck[q] += gs * ((1 - t.fr) * (a[1] - a[0]) + t.fr * (a[xp.wp + 1] - a[xp.wp]));
            }
          }
        }
      }
    }
    if (dx) {
      double* dxb = dx->data() + b * g.c * plane;
      for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t i = 0; i < g.h; ++i)
          for (std::size_t j = 0; j < g.w; ++j) dxb[(ci * g.h + i) * g.w + j] += dxp[(ci * xp.hp + i + 1) * xp.wp + j + 1];
    }
  });
  if (dweight) {
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t i = 0; i < weight.size(); ++i) (*dweight)[i] += dw_parts[b][i];
  }
}

}  // namespace kernels

namespace ops {

/// Differentiable with respect to x, V, the offsets and W.
inline Var pdf_apply(Var x, Var v, Var delta, Var weight) {
  Tape& t = detail::same_tape(x, weight);
  Tensor y = kernels::pdf_forward(x.value(), v.value(), delta.value(), weight.value());
  return t.push("pdf_apply", std::move(y), {x, v, delta, weight}, [x, v, delta, weight](const Tensor& dy) {
    Tape& tp = *x.tape;
    kernels::pdf_backward(x.value(), v.value(), delta.value(), weight.value(), dy,
                          tp.requires_grad(x) ? &tp.grad(x) : nullptr, tp.requires_grad(v) ? &tp.grad(v) : nullptr,
                          tp.requires_grad(delta) ? &tp.grad(delta) : nullptr,
                          tp.requires_grad(weight) ? &tp.grad(weight) : nullptr);
  });
}

}  // namespace ops

/// Per-pixel kernels V = kernel_gen(x), [N,K^2,H,W]. No normalisation.
inline Var generate_kernels(Tape& t, const PDFParams& p, Var x) { return p.kernel_gen(t, x); }

/// Offsets delta_max * tanh(offset_gen(x)), [N,2K^2,H,W].
inline Var generate_offsets(Tape& t, const PDFParams& p, Var x) {
  const double dmax = p.config.delta_max;
  if (p.config.offsets == OffsetMode::dynamic) return ops::scale(ops::tanh(p.offset_gen(t, x)), dmax);
  Var shared = ops::scale(ops::tanh(t.param(*p.learned_offsets)), dmax);
  Var zeros = t.constant(Tensor({x.dim(0), 2 * p.config.taps(), x.dim(2), x.dim(3)}));
  return ops::add(zeros, shared);
}

struct PDFResult {
  Var output;   // [N,C,H,W]
  Var kernels;  // V
  Var offsets;  // delta
};

inline PDFResult pdf_forward(Tape& t, const PDFParams& p, Var x) {
  PDFResult r;
  r.kernels = generate_kernels(t, p, x);
  r.offsets = generate_offsets(t, p, x);
  r.output = ops::pdf_apply(x, r.kernels, r.offsets, t.param(*p.weight));
  return r;
}

// ---------------------------------------------------------------------------
// Dominant orientation of an offset field.

struct Orientation {
  bool isotropic = true;
  double degrees = 0.0;  // in [0, 180), measured from the column axis towards the row axis
};

/// Principal axis of the (row, col) displacement vectors of every tap and
/// pixel, from their 2x2 covariance. Degenerate (circular or empty) spreads
/// are reported as isotropic.
inline Orientation offset_orientation(const Tensor& delta) {
  if (delta.rank() != 4 && delta.rank() != 3) throw DimensionError("offset field must be [N,2K^2,H,W] or [2K^2,H,W]");
  const std::size_t lead = delta.rank() == 4 ? delta.dim(0) : 1;
  const std::size_t ch = delta.dim(delta.rank() - 3);
  const std::size_t plane = delta.dim(delta.rank() - 2) * delta.dim(delta.rank() - 1);
  if (ch % 2 != 0) throw DimensionError("offset field must have an even channel count");
  double sr = 0, sc = 0, srr = 0, scc = 0, src = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < lead; ++b)
    for (std::size_t k = 0; k < ch / 2; ++k) {
      const double* dr = delta.data() + (b * ch + 2 * k) * plane;
      const double* dc = dr + plane;
      for (std::size_t p = 0; p < plane; ++p) {
        sr += dr[p];
        sc += dc[p];
        srr += dr[p] * dr[p];
        scc += dc[p] * dc[p];
        src += dr[p] * dc[p];
        ++count;
      }
    }
  const double n = static_cast<double>(count);
  const double mr = sr / n, mc = sc / n;
  const double var_r = srr / n - mr * mr, var_c = scc / n - mc * mc, cov = src / n - mr * mc;
  const double spread = std::hypot(var_c - var_r, 2.0 * cov);
  const double scale = std::max(std::abs(var_r) + std::abs(var_c), 1e-300);
  if (spread <= 1e-12 * scale || var_r + var_c <= 0.0) return {};
  double deg = 0.5 * std::atan2(2.0 * cov, var_c - var_r) * 180.0 / M_PI;
  if (deg < 0) deg += 180.0;
  if (deg >= 180.0) deg -= 180.0;
  return {false, deg};
}

}  // namespace cadeblur
