#pragma once

// Full-reference image quality for data in [0, 1].

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "cadeblur/core/errors.hpp"
#include "cadeblur/core/tensor.hpp"

namespace cadeblur {

/// 10 log10(1 / MSE); +infinity for identical inputs.
inline double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("psnr: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(a.size()) / se);
}

struct SSIMOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = 0.5 * static_cast<double>(size - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    total += (g[i] = std::exp(-d * d / (2 * sigma * sigma)));
  }
  for (double& v : g) v /= total;
  return g;
}

/// Separable valid-mode Gaussian filter of one plane.
inline std::vector<double> filter_valid(const double* p, std::size_t h, std::size_t w, const std::vector<double>& g) {
  const std::size_t k = g.size(), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(h * wo, 0.0), out(ho * wo, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += g[j] * p[y * w + x + j];
      rows[y * wo + x] = acc;
    }
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * wo + x];
      out[y * wo + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over valid Gaussian windows, averaged over channels. Accepts
/// [C,H,W] or [N,C,H,W] (every plane weighted equally).
inline double ssim(const Tensor& a, const Tensor& b, const SSIMOptions& opt = {}) {
  if (a.shape() != b.shape()) {
    throw DimensionError("ssim: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (a.rank() != 3 && a.rank() != 4) throw DimensionError("ssim expects [C,H,W] or [N,C,H,W]");
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  if (h < opt.window || w < opt.window) {
    throw DimensionError("ssim needs images of at least " + std::to_string(opt.window) + "x" +
                         std::to_string(opt.window));
  }
  const std::size_t planes = a.size() / (h * w);
  const double c1 = (opt.k1 * 1.0) * (opt.k1 * 1.0), c2 = (opt.k2 * 1.0) * (opt.k2 * 1.0);
  const auto g = detail::gaussian_window(opt.window, opt.sigma);

  double total = 0.0;
  std::vector<double> aa(h * w), bb(h * w), ab(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* pa = a.data() + p * h * w;
    const double* pb = b.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = detail::filter_valid(pa, h, w, g), mu_b = detail::filter_valid(pb, h, w, g);
    const auto e_aa = detail::filter_valid(aa.data(), h, w, g), e_bb = detail::filter_valid(bb.data(), h, w, g);
    const auto e_ab = detail::filter_valid(ab.data(), h, w, g);
    double plane = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      const double num = (2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2);
      const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
      plane += num / den;
    }
    total += plane / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(planes);
}

}  // namespace cadeblur
