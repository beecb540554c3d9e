#pragma once

// Linear motion-blur kernels and blur synthesis.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

#include "cadeblur/core/errors.hpp"
#include "cadeblur/core/kernels.hpp"
#include "cadeblur/core/tensor.hpp"

namespace cadeblur {

enum class BlurKind { linear };

struct BlurSpec {
  std::size_t length = 1;  // pixels
  double angle = 0.0;      // degrees in [0, 180), counter-clockwise from the column axis toward +row
  BlurKind kind = BlurKind::linear;

  void validate() const {
    if (length < 1) throw ConfigError("blur length must be >= 1");
    if (!(angle >= 0.0 && angle < 180.0)) throw ConfigError("blur angle must be in [0, 180)");
  }
  bool operator==(const BlurSpec&) const = default;
};

/// Unit-sum line segment of `length` pixels through the kernel center,
/// rasterized by splatting dense samples with bilinear weights.
/// Kernel side is the smallest odd number >= length.
inline Tensor linear_psf(const BlurSpec& spec) {
  spec.validate();
  const std::size_t k = spec.length % 2 == 1 ? spec.length : spec.length + 1;
  const auto half = static_cast<double>(k / 2);
  Tensor psf({k, k});
  if (spec.length == 1) {
    psf[0] = 1.0;
    return psf;
  }
  const double rad = spec.angle * std::numbers::pi / 180.0;
  double dr = std::sin(rad), dc = std::cos(rad);
  if (std::abs(dr) < 1e-12) dr = 0.0;
  if (std::abs(dc) < 1e-12) dc = 0.0;

  const double reach = 0.5 * static_cast<double>(spec.length - 1);
  const std::size_t samples = 64 * (spec.length - 1) + 1;
  for (std::size_t s = 0; s < samples; ++s) {
    const double t = -reach + 2.0 * reach * static_cast<double>(s) / static_cast<double>(samples - 1);
    const double r = half + t * dr, c = half + t * dc;
    const double r0 = std::floor(r), c0 = std::floor(c);
    const double fr = r - r0, fc = c - c0;
    const double w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
    const double rr[4] = {r0, r0, r0 + 1, r0 + 1}, cc[4] = {c0, c0 + 1, c0, c0 + 1};
    for (int i = 0; i < 4; ++i) {
      if (w[i] == 0.0) continue;
      psf[static_cast<std::size_t>(rr[i]) * k + static_cast<std::size_t>(cc[i])] += w[i];
    }
  }
  double total = 0.0;
  for (double v : psf.values()) total += v;
  for (double& v : psf.values()) v /= total;
  return psf;
}

/// Convolves every channel of [C,H,W] with a square kernel, reflect padding.
inline Tensor convolve_reflect(const Tensor& image, const Tensor& kernel) {
  if (image.rank() != 3) throw DimensionError("expected [C,H,W], got " + shape_string(image.shape()));
  if (kernel.rank() != 2 || kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0) {
    throw DimensionError("kernel must be square with odd side, got " + shape_string(kernel.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), k = kernel.dim(0);
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::ptrdiff_t y = 0; y < sh; ++y) {
      for (std::ptrdiff_t x = 0; x < sw; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(k); ++i) {
          // true convolution: kernel flipped
          const std::ptrdiff_t yy = kernels::padded_index(y + half - i, sh, kernels::Padding::reflect);
          for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k); ++j) {
            const double kv = kernel[static_cast<std::size_t>(i) * k + static_cast<std::size_t>(j)];
            if (kv == 0.0) continue;
            const std::ptrdiff_t xx = kernels::padded_index(x + half - j, sw, kernels::Padding::reflect);
            acc += kv * src[yy * sw + xx];
          }
        }
        dst[y * sw + x] = acc;
      }
    }
  }
  return out;
}

/// Blurs [C,H,W], adds N(0, noise_sigma^2) noise drawn from `seed` and clamps to [0, 1].
inline Tensor apply_blur(const Tensor& sharp, const BlurSpec& spec, double noise_sigma = 0.0,
                         std::uint64_t seed = 0) {
  if (noise_sigma < 0) throw ConfigError("noise sigma must be >= 0");
  Tensor out = convolve_reflect(sharp, linear_psf(spec));
  if (noise_sigma > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (double& v : out.values()) v += noise(rng);
  }
  for (double& v : out.values()) v = std::min(1.0, std::max(0.0, v));
  return out;
}

/// Anisotropic total variation of [C,H,W]: sum of absolute neighbour differences.
inline double total_variation(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("expected [C,H,W], got " + shape_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  double tv = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = image.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (x + 1 < w) tv += std::abs(p[y * w + x + 1] - p[y * w + x]);
        if (y + 1 < h) tv += std::abs(p[(y + 1) * w + x] - p[y * w + x]);
      }
  }
  return tv;
}

}  // namespace cadeblur
