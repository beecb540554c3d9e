#pragma once

// Procedural sharp images and seeded blurred/sharp pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "cadeblur/core/parallel.hpp"
#include "cadeblur/data/psf.hpp"

namespace cadeblur {

struct ImagePair {
  Tensor sharp;    // [3,H,W]
  Tensor blurred;  // [3,H,W]
  BlurSpec spec;
  std::uint64_t seed = 0;
};

/// Independent per-sample seed (splitmix64 of base and index).
inline std::uint64_t sample_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

using Color = std::array<double, 3>;

inline Color random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng), u(rng), u(rng)};
}

inline void paint(Tensor& img, std::size_t y, std::size_t x, const Color& c, double alpha) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double& v = img[(ch * h + y) * w + x];
    v = (1 - alpha) * v + alpha * c[ch];
  }
}

struct Point {
  double y, x;
};

inline bool inside_polygon(const std::vector<Point>& poly, double y, double x) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point a = poly[i], b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

inline double segment_distance(Point p, Point a, Point b) {
  const double vy = b.y - a.y, vx = b.x - a.x;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0 ? ((p.y - a.y) * vy + (p.x - a.x) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = p.y - (a.y + t * vy), dx = p.x - (a.x + t * vx);
  return std::sqrt(dy * dy + dx * dx);
}

}  // namespace detail

/// Sharp RGB image in [0,1]: a linear colour gradient, random polygons with
/// hard edges and text-like thick strokes. Fully determined by `seed`.
inline Tensor procedural_image(std::size_t height, std::size_t width, std::uint64_t seed) {
  using detail::Point;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor img({3, height, width});
  const auto fh = static_cast<double>(height), fw = static_cast<double>(width);

  const detail::Color c0 = detail::random_color(rng), c1 = detail::random_color(rng);
  const double theta = u(rng) * 2 * std::numbers::pi;
  const double gy = std::sin(theta), gx = std::cos(theta);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double t = 0.5 + 0.5 * (gy * (static_cast<double>(y) / fh - 0.5) + gx * (static_cast<double>(x) / fw - 0.5));
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * height + y) * width + x] = (1 - t) * c0[ch] + t * c1[ch];
    }

  const int polygons = 3 + static_cast<int>(rng() % 5);
  for (int p = 0; p < polygons; ++p) {
    const Point centre{u(rng) * fh, u(rng) * fw};
    const double radius = (0.08 + 0.3 * u(rng)) * std::min(fh, fw);
    const int vertices = 3 + static_cast<int>(rng() % 4);
    std::vector<double> angles(static_cast<std::size_t>(vertices));
    for (double& a : angles) a = u(rng) * 2 * std::numbers::pi;
    std::sort(angles.begin(), angles.end());
    std::vector<Point> poly;
    for (double a : angles) {
      const double r = radius * (0.5 + 0.5 * u(rng));
      poly.push_back({centre.y + r * std::sin(a), centre.x + r * std::cos(a)});
    }
    const detail::Color c = detail::random_color(rng);
    const double alpha = 0.6 + 0.4 * u(rng);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        if (detail::inside_polygon(poly, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) {
          detail::paint(img, y, x, c, alpha);
        }
      }
  }

  const int strokes = 2 + static_cast<int>(rng() % 5);
  for (int s = 0; s < strokes; ++s) {
    const detail::Color c = detail::random_color(rng);
    const double thickness = 0.6 + 1.4 * u(rng);
    Point a{u(rng) * fh, u(rng) * fw};
    const int segments = 1 + static_cast<int>(rng() % 3);
    for (int k = 0; k < segments; ++k) {
      const double len = (0.1 + 0.25 * u(rng)) * std::min(fh, fw), dir = u(rng) * 2 * std::numbers::pi;
      const Point b{a.y + len * std::sin(dir), a.x + len * std::cos(dir)};
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double d = detail::segment_distance({static_cast<double>(y), static_cast<double>(x)}, a, b);
          if (d <= thickness) detail::paint(img, y, x, c, 1.0);
        }
      a = b;
    }
  }
  for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

struct SynthOptions {
  std::size_t count = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_length = 3;
  std::size_t max_length = 15;
  /// When non-empty, sample i uses angles[i % angles.size()] instead of a uniform angle.
  std::vector<double> angles;
  /// Fixed blur length overriding the [min_length, max_length] range.
  std::optional<std::size_t> length;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("image size must be positive");
    if (min_length < 1 || min_length > max_length) throw ConfigError("need 1 <= min_length <= max_length");
    if (length && *length < 1) throw ConfigError("blur length must be >= 1");
    for (double a : angles) {
      if (!(a >= 0 && a < 180)) throw ConfigError("blur angles must be in [0, 180)");
    }
    if (noise_sigma < 0) throw ConfigError("noise sigma must be >= 0");
  }
};

inline BlurSpec draw_blur(const SynthOptions& opt, std::size_t index, std::mt19937_64& rng) {
  BlurSpec spec;
  if (opt.length) {
    spec.length = *opt.length;
  } else {
    spec.length = std::uniform_int_distribution<std::size_t>(opt.min_length, opt.max_length)(rng);
  }
  if (!opt.angles.empty()) {
    spec.angle = opt.angles[index % opt.angles.size()];
  } else {
    spec.angle = std::uniform_real_distribution<double>(0.0, 180.0)(rng);
  }
  return spec;
}

/// Sample `index` of the dataset described by `opt`; independent of every other sample.
inline ImagePair make_pair(const SynthOptions& opt, std::size_t index) {
  ImagePair pair;
  pair.seed = sample_seed(opt.seed, index);
  std::mt19937_64 rng(pair.seed);
  pair.spec = draw_blur(opt, index, rng);
  pair.sharp = procedural_image(opt.height, opt.width, rng());
  pair.blurred = apply_blur(pair.sharp, pair.spec, opt.noise_sigma, rng());
  return pair;
}

inline std::vector<ImagePair> make_dataset(const SynthOptions& opt) {
  opt.validate();
  std::vector<ImagePair> pairs(opt.count);
  parallel_for(opt.count, [&](std::size_t i) { pairs[i] = make_pair(opt, i); });
  return pairs;
}

}  // namespace cadeblur
