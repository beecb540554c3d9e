#pragma once

// Drivers behind the bench-attn, dump-maps and offset-experiment commands.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cadeblur/core/audit.hpp"
#include "cadeblur/data/image_io.hpp"
#include "cadeblur/train/trainer.hpp"

namespace cadeblur {

// ---------------------------------------------------------------------------
// Attention complexity benchmark

struct BenchOptions {
  std::vector<std::size_t> sizes{32, 45, 64, 91, 128};
  std::vector<std::size_t> clusters{8};
  std::size_t channels = 32;
  std::size_t repeats = 9;
  std::size_t max_positions = kStandardAttentionMaxPositions;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t size = 0;  // H = W
  std::size_t clusters = 0;
  double efficient_seconds = 0.0;
  std::optional<double> standard_seconds;  // empty when refused by the guard
  std::string refusal;
  std::size_t efficient_largest_buffer = 0;  // elements, from the allocation audit
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("fit_line needs at least two points");
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

template <typename Fn>
double median_seconds(std::size_t repeats, Fn&& fn) {
  std::vector<double> t;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

inline std::vector<BenchRow> bench_attention(const BenchOptions& opt) {
  std::vector<BenchRow> rows;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t c2 : opt.clusters) {
    ParameterStore store;
    const AttentionParams ap = make_attention(store, "bench", {opt.channels, c2, AttentionVariant::self}, rng);
    const StandardAttentionParams sp = make_standard_attention(opt.channels, c2, opt.channels, rng);
    for (std::size_t s : opt.sizes) {
      Tensor x({1, opt.channels, s, s});
      for (double& v : x.values()) v = normal(rng);
      BenchRow row;
      row.size = s;
      row.clusters = c2;
      {
        AllocationAudit audit;
        Tape t(false);
        (void)efficient_attention(t, ap, t.constant(x));
        row.efficient_largest_buffer = audit.largest();
      }
      row.efficient_seconds = median_seconds(opt.repeats, [&] {
        Tape t(false);
        (void)efficient_attention(t, ap, t.constant(x));
      });
      const Tensor x3 = x.reshaped({opt.channels, s, s});
      if (s * s > opt.max_positions) {
        row.refusal = "refused: " + std::to_string(s * s) + " positions exceed the guard of " +
                      std::to_string(opt.max_positions);
      } else {
        row.standard_seconds =
            median_seconds(opt.repeats, [&] { (void)standard_attention(x3, sp, opt.max_positions); });
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

struct BenchSummary {
  std::size_t clusters = 0;
  LinearFit efficient;         // seconds against HW
  std::optional<LinearFit> standard_loglog;  // log seconds against log HW
  std::optional<std::size_t> crossover;      // smallest size where standard is slower
  bool no_quadratic_buffer = true;
};

inline std::vector<BenchSummary> summarize_bench(const std::vector<BenchRow>& rows) {
  std::vector<BenchSummary> out;
  for (std::size_t i = 0; i < rows.size();) {
    BenchSummary s;
    s.clusters = rows[i].clusters;
    std::vector<double> hw, te, lhw, lts;
    for (; i < rows.size() && rows[i].clusters == s.clusters; ++i) {
      const BenchRow& r = rows[i];
      const auto positions = static_cast<double>(r.size * r.size);
      hw.push_back(positions);
      te.push_back(r.efficient_seconds);
      if (r.efficient_largest_buffer >= r.size * r.size * r.size * r.size) s.no_quadratic_buffer = false;
      if (r.standard_seconds) {
        lhw.push_back(std::log(positions));
        lts.push_back(std::log(*r.standard_seconds));
        if (!s.crossover && *r.standard_seconds > r.efficient_seconds) s.crossover = r.size;
      }
    }
    s.efficient = fit_line(hw, te);
    if (lhw.size() >= 2) s.standard_loglog = fit_line(lhw, lts);
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intermediate maps of one content-aware block

struct MapImage {
  std::string name;
  Tensor values;  // [H,W] raw values
  double min = 0.0;
  double max = 0.0;
};

/// Per-pixel variance of the K^2 generated kernel values, [N,K^2,H,W] -> [H,W] of item 0.
inline Tensor kernel_variance(const Tensor& v) {
  const std::size_t taps = v.dim(1), h = v.dim(2), w = v.dim(3);
  Tensor out({h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0, ss = 0;
    for (std::size_t k = 0; k < taps; ++k) {
      const double x = v[k * h * w + p];
      s += x;
      ss += x * x;
    }
    const double mean = s / static_cast<double>(taps);
    out[p] = ss / static_cast<double>(taps) - mean * mean;
  }
  return out;
}

/// Mean horizontal (column) offset over taps, [N,2K^2,H,W] -> [H,W] of item 0.
inline Tensor horizontal_offsets(const Tensor& delta) {
  const std::size_t taps = delta.dim(1) / 2, h = delta.dim(2), w = delta.dim(3);
  Tensor out({h, w});
  for (std::size_t k = 0; k < taps; ++k)
    for (std::size_t p = 0; p < h * w; ++p) out[p] += delta[(2 * k + 1) * h * w + p] / static_cast<double>(taps);
  return out;
}

inline Tensor plane_of(const Tensor& t, std::size_t channel, std::size_t h, std::size_t w) {
  Tensor out({h, w});
  std::copy_n(t.data() + channel * h * w, h * w, out.data());
  return out;
}

inline Tensor as_batch(const Tensor& image) {
  return image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
}

/// Runs one forward pass and collects M1, one Q cluster, M_fus, the
/// horizontal offset field and the kernel variance of the probed block.
/// Maps that the block does not have are skipped.
inline std::vector<MapImage> collect_maps(const Network& net, const Tensor& image, Probe probe,
                                          std::size_t cluster = 0) {
  Tape t(false);
  (void)net.forward(t, t.constant(as_batch(image)), &probe);
  if (!probe.result) throw ConfigError("probe did not match any content-aware block");
  const CAPResult& r = *probe.result;
  std::vector<MapImage> maps;
  auto add = [&](std::string name, Tensor v) {
    MapImage m{std::move(name), std::move(v), 0.0, 0.0};
    const auto [lo, hi] = std::minmax_element(m.values.values().begin(), m.values.values().end());
    m.min = *lo;
    m.max = *hi;
    maps.push_back(std::move(m));
  };
  if (r.self_attn) {
    const Tensor& m1 = r.self_attn->maps.mask.value();
    const std::size_t h = m1.dim(2), w = m1.dim(3);
    add("mask_m1", plane_of(m1, 0, h, w));
    const Tensor& q = r.self_attn->maps.clusters.value();
    if (cluster >= q.dim(1)) throw ConfigError("cluster index out of range");
    add("cluster_q" + std::to_string(cluster), plane_of(q, cluster, h, w));
  }
  if (r.fusion_mask) {
    const Tensor& f = r.fusion_mask->value();
    add("fusion_mask", plane_of(f, 0, f.dim(2), f.dim(3)));
  }
  if (r.pdf) {
    add("horizontal_offset", horizontal_offsets(r.pdf->offsets.value()));
    add("kernel_variance", kernel_variance(r.pdf->kernels.value()));
  }
  return maps;
}

/// Min-max normalised grayscale; a flat map is written as mid-gray.
inline Tensor normalized_map(const MapImage& m) {
  Tensor g({1, m.values.dim(0), m.values.dim(1)});
  const double range = m.max - m.min;
  for (std::size_t i = 0; i < m.values.size(); ++i) g[i] = range > 0 ? (m.values[i] - m.min) / range : 0.5;
  return g;
}

// ---------------------------------------------------------------------------
// Offset orientation experiment

/// Signed difference of two axial angles (degrees, period 180) in [-90, 90).
inline double axial_difference(double a, double b) {
  double d = std::fmod(a - b, 180.0);
  if (d < -90.0) d += 180.0;
  if (d >= 90.0) d -= 180.0;
  return d;
}

/// Circular-circular correlation of axial data: angles are doubled onto the
/// full circle and compared by the pairwise sine form, which needs no mean
/// direction. Undefined (NaN) when either sample has no spread.
inline double axial_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("axial_correlation needs two equal samples of size >= 2");
  const double k = 2.0 * std::numbers::pi / 180.0;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double sa = std::sin(k * (a[i] - a[j])), sb = std::sin(k * (b[i] - b[j]));
      num += sa * sb;
      da += sa * sa;
      db += sb * sb;
    }
  return num / std::sqrt(da * db);
}

struct OffsetExperimentOptions {
  std::vector<double> angles{0, 45, 90, 135};
  std::size_t blur_length = 11;
  std::size_t train_images = 25;
  std::size_t eval_images = 8;
  std::size_t image_size = 64;
  NetworkConfig network = NetworkConfig::ablation(8);
  TrainConfig train{};
  Probe probe{};  // block whose offsets are measured
  std::uint64_t seed = 0;
  /// When set, each angle trains through angle_<i>.ckpt here and resumes from it.
  std::optional<std::filesystem::path> run_dir;
};

struct OffsetRow {
  double psf_angle = 0.0;
  Orientation measured;
  double error = 0.0;  // |axial difference| in degrees, NaN when isotropic
  double final_loss = 0.0;
};

struct OffsetReport {
  std::vector<OffsetRow> rows;
  double correlation = 0.0;  // NaN when any row is isotropic
};

/// Measures the dominant offset orientation of a trained network on blurred images.
inline Orientation measure_orientation(const Network& net, const std::vector<ImagePair>& pairs, Probe probe) {
  std::vector<Tensor> fields;
  std::size_t ch = 0, h = 0, w = 0;
  for (const ImagePair& p : pairs) {
    Probe pr = probe;
    Tape t(false);
    (void)net.forward(t, t.constant(as_batch(p.blurred)), &pr);
    if (!pr.result || !pr.result->pdf) throw ConfigError("probed block has no pixel-dependent filtering branch");
    const Tensor& d = pr.result->pdf->offsets.value();
    ch = d.dim(1);
    h = d.dim(2);
    w = d.dim(3);
    for (std::size_t b = 0; b < d.dim(0); ++b) {
      Tensor item({ch, h, w});
      std::copy_n(d.data() + b * ch * h * w, ch * h * w, item.data());
      fields.push_back(std::move(item));
    }
  }
  Tensor all({fields.size(), ch, h, w});
  for (std::size_t i = 0; i < fields.size(); ++i) std::copy_n(fields[i].data(), fields[i].size(), all.data() + i * fields[i].size());
  return offset_orientation(all);
}

inline OffsetReport offset_experiment(const OffsetExperimentOptions& opt,
                                      const std::function<void(double angle, const MetricsRecord&)>& progress = {}) {
  OffsetReport report;
  std::vector<double> psf, measured;
  bool isotropic = false;
  for (std::size_t a = 0; a < opt.angles.size(); ++a) {
    SynthOptions synth;
    synth.count = opt.train_images + opt.eval_images;
    synth.height = synth.width = opt.image_size;
    synth.angles = {opt.angles[a]};
    synth.length = opt.blur_length;
    synth.seed = sample_seed(opt.seed, a);
    std::vector<ImagePair> pairs = make_dataset(synth);
    std::vector<ImagePair> eval(pairs.begin() + static_cast<std::ptrdiff_t>(opt.train_images), pairs.end());
    pairs.resize(opt.train_images);

    Network net(opt.network, opt.seed + 1);
    TrainConfig tc = opt.train;
    tc.seed = sample_seed(opt.seed + 7, a);
    tc.horizontal_flip = false;  // a mirror maps 45 degrees onto 135
    Trainer trainer(net, tc, std::move(pairs));
    std::optional<std::filesystem::path> ckpt;
    if (opt.run_dir) {
      std::filesystem::create_directories(*opt.run_dir);
      ckpt = *opt.run_dir / ("angle_" + std::to_string(a) + ".ckpt");
      if (std::filesystem::exists(*ckpt)) trainer.load(*ckpt);
    }
    double last = std::numeric_limits<double>::quiet_NaN();
    trainer.run(ckpt, std::nullopt, [&](const MetricsRecord& r) {
      last = r.loss;
      if (progress) progress(opt.angles[a], r);
    });

    OffsetRow row;
    row.psf_angle = opt.angles[a];
    row.measured = measure_orientation(net, eval, opt.probe);
    row.final_loss = last;
    if (row.measured.isotropic) {
      isotropic = true;
      row.error = std::numeric_limits<double>::quiet_NaN();
    } else {
      row.error = std::abs(axial_difference(row.measured.degrees, row.psf_angle));
      psf.push_back(row.psf_angle);
      measured.push_back(row.measured.degrees);
    }
    report.rows.push_back(row);
  }
  report.correlation = isotropic || psf.size() < 2 ? std::numeric_limits<double>::quiet_NaN()
                                                   : axial_correlation(psf, measured);
  return report;
}

}  // namespace cadeblur
