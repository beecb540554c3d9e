#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "cadeblur/cadeblur.hpp"
#include "support/monitor.hpp"
#include "support/op_cases.hpp"

using namespace cadeblur;
using testkit::uniform_tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("cadeblur_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

double sum(const Tensor& t) {
  double s = 0;
  for (double v : t.values()) s += v;
  return s;
}

/// SSIM from its definition: a full 2D Gaussian window at every valid position.
double ssim_reference(const Tensor& a, const Tensor& b) {
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2), k = 11;
  std::vector<double> g(k * k);
  double gs = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - 5, dj = static_cast<double>(j) - 5;
      gs += g[i * k + j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
    }
  for (double& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y + k <= h; ++y)
      for (std::size_t x = 0; x + k <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double wt = g[i * k + j];
            const double va = a[(ch * h + y + i) * w + x + j], vb = b[(ch * h + y + i) * w + x + j];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace

// ---------------------------------------------------------------------------
// PSF

TEST(PSF, LengthOneIsIdentity) {
  const Tensor k = linear_psf({1, 73.0});
  ASSERT_EQ(k.shape(), (Shape{1, 1}));
  EXPECT_EQ(k[0], 1.0);
}

TEST(PSF, HorizontalMassOnCentralRow) {
  const Tensor k = linear_psf({5, 0.0});
  ASSERT_EQ(k.shape(), (Shape{5, 5}));
  double row = 0;
  for (std::size_t j = 0; j < 5; ++j) row += k[2 * 5 + j];
  EXPECT_NEAR(row, 1.0, 1e-12);
  for (std::size_t i = 0; i < 5; ++i) {
    if (i == 2) continue;
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(k[i * 5 + j], 0.0);
  }
  // vertical blur puts it on the central column
  const Tensor v = linear_psf({5, 90.0});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (j != 2) {
        EXPECT_EQ(v[i * 5 + j], 0.0);
      }
}

TEST(PSF, EvenLengthUsesNextOddSide) { EXPECT_EQ(linear_psf({6, 30.0}).shape(), (Shape{7, 7})); }

TEST(PSF, UnitSumAndSupportBound) {
  std::mt19937_64 rng(61);
  for (int i = 0; i < 100; ++i) {
    const BlurSpec spec{1 + rng() % 21, std::uniform_real_distribution<double>(0, 180)(rng)};
    const Tensor k = linear_psf(spec);
    EXPECT_NEAR(sum(k), 1.0, 1e-12);
    const std::size_t side = k.dim(0);
    const double half = static_cast<double>(side / 2), reach = 0.5 * static_cast<double>(spec.length);
    double outside = 0;
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        EXPECT_GE(k[r * side + c], 0.0);
        const double dr = std::abs(static_cast<double>(r) - half), dc = std::abs(static_cast<double>(c) - half);
        if (std::max(dr, dc) > reach) outside += k[r * side + c];
      }
    EXPECT_LT(outside, 1e-12) << spec.length << " " << spec.angle;
  }
}

TEST(PSF, CentroidAtCenterAndOrientedAlongAngle) {
  for (double angle : {20.0, 60.0, 135.0}) {
    const Tensor k = linear_psf({9, angle});
    double mr = 0, mc = 0, srr = 0, scc = 0, src = 0;
    for (std::size_t r = 0; r < 9; ++r)
      for (std::size_t c = 0; c < 9; ++c) {
        const double v = k[r * 9 + c], dr = static_cast<double>(r) - 4, dc = static_cast<double>(c) - 4;
        mr += v * dr;
        mc += v * dc;
        srr += v * dr * dr;
        scc += v * dc * dc;
        src += v * dr * dc;
      }
    EXPECT_NEAR(mr, 0.0, 1e-9);
    EXPECT_NEAR(mc, 0.0, 1e-9);
    const double deg = 0.5 * std::atan2(2 * src, scc - srr) * 180 / M_PI;
    EXPECT_NEAR(axial_difference(deg, angle), 0.0, 2.0) << angle;
  }
}

TEST(PSF, RejectsInvalidSpecs) {
  EXPECT_THROW(linear_psf({0, 0.0}), ConfigError);
  EXPECT_THROW(linear_psf({3, 180.0}), ConfigError);
  EXPECT_THROW(linear_psf({3, -1.0}), ConfigError);
}

TEST(Blur, IdentityAndConstant) {
  std::mt19937_64 rng(62);
  const Tensor img = uniform_tensor({3, 12, 10}, rng, 0, 1);
  EXPECT_EQ(max_abs_diff(apply_blur(img, {1, 0.0}), img), 0.0);
  const Tensor flat({3, 12, 10}, 0.42);
  for (double v : apply_blur(flat, {9, 33.0}).values()) EXPECT_NEAR(v, 0.42, 1e-12);
}

TEST(Blur, PreservesMeanWithConstantBorder) {
  // Reflect padding keeps the mean exactly when the band the kernel reaches past the border is flat.
  std::mt19937_64 rng(63);
  for (int i = 0; i < 10; ++i) {
    const BlurSpec spec{3 + rng() % 13, std::uniform_real_distribution<double>(0, 180)(rng)};
    const std::size_t band = spec.length + 1, h = 48, w = 40;
    Tensor img({3, h, w}, 0.5);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = band; y < h - band; ++y)
        for (std::size_t x = band; x < w - band; ++x) img[(c * h + y) * w + x] = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_NEAR(sum(apply_blur(img, spec)) / img.size(), sum(img) / img.size(), 1e-6);
  }
}

TEST(Blur, ReducesTotalVariation) {
  std::mt19937_64 rng(64);
  for (int i = 0; i < 20; ++i) {
    const Tensor img = uniform_tensor({3, 24, 24}, rng, 0, 1);
    const BlurSpec spec{3 + rng() % 13, std::uniform_real_distribution<double>(0, 180)(rng)};
    EXPECT_LE(total_variation(apply_blur(img, spec)), total_variation(img));
  }
}

TEST(Blur, NoiseLowersPsnrMonotonically) {
  std::mt19937_64 rng(65);
  const Tensor img = uniform_tensor({3, 32, 32}, rng, 0.2, 0.8);
  EXPECT_TRUE(std::isinf(psnr(apply_blur(img, {1, 0.0}, 0.0, 99), img)));
  double last = INFINITY;
  for (double sigma : {0.01, 0.02, 0.05, 0.1}) {
    const double p = psnr(apply_blur(img, {1, 0.0}, sigma, 99), img);
    EXPECT_LT(p, last) << sigma;
    last = p;
  }
}

TEST(Blur, ConvolutionFlipsKernel) {
  // The impulse response of a convolution is the kernel itself, not its mirror.
  Tensor impulse({1, 9, 9});
  impulse[4 * 9 + 4] = 1.0;
  Tensor kernel({3, 3});
  kernel[0] = 1.0;  // top-left tap
  const Tensor y = convolve_reflect(impulse, kernel);
  EXPECT_DOUBLE_EQ(y[3 * 9 + 3], 1.0);
  EXPECT_DOUBLE_EQ(sum(y), 1.0);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, PsnrAnalyticValue) {
  std::mt19937_64 rng(66);
  const Tensor a = uniform_tensor({3, 16, 16}, rng, 0, 0.5);
  Tensor b = a;
  for (double& v : b.values()) v += 10.0 / 255.0;
  EXPECT_NEAR(psnr(a, b), 28.1308, 1e-3);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_THROW(psnr(a, Tensor({3, 16, 15})), DimensionError);
}

TEST(Metrics, SsimIdentityIsExactlyOne) {
  std::mt19937_64 rng(67);
  const Tensor a = uniform_tensor({3, 20, 24}, rng, 0, 1);
  EXPECT_EQ(ssim(a, a), 1.0);
  EXPECT_THROW(ssim(Tensor({3, 8, 8}), Tensor({3, 8, 8})), DimensionError);
}

TEST(Metrics, MatchScalarReferences) {
  std::mt19937_64 rng(68);
  SynthOptions s;
  s.count = 1;
  s.height = 24;
  s.width = 30;
  s.seed = 5;
  const ImagePair pair = make_pair(s, 0);
  double se = 0;
  for (std::size_t i = 0; i < pair.sharp.size(); ++i) se += std::pow(pair.sharp[i] - pair.blurred[i], 2);
  EXPECT_NEAR(psnr(pair.blurred, pair.sharp), 10 * std::log10(pair.sharp.size() / se), 1e-9);
  EXPECT_NEAR(ssim(pair.blurred, pair.sharp), ssim_reference(pair.blurred, pair.sharp), 1e-6);
  const Tensor noisy = uniform_tensor({3, 24, 30}, rng, 0, 1);
  EXPECT_NEAR(ssim(noisy, pair.sharp), ssim_reference(noisy, pair.sharp), 1e-6);
}

TEST(Metrics, BatchedSsimAveragesItems) {
  std::mt19937_64 rng(69);
  const Tensor a = uniform_tensor({2, 3, 16, 16}, rng, 0, 1), b = uniform_tensor({2, 3, 16, 16}, rng, 0, 1);
  Tensor a0({3, 16, 16}), a1({3, 16, 16}), b0({3, 16, 16}), b1({3, 16, 16});
  std::copy_n(a.data(), 768, a0.data());
  std::copy_n(a.data() + 768, 768, a1.data());
  std::copy_n(b.data(), 768, b0.data());
  std::copy_n(b.data() + 768, 768, b1.data());
  EXPECT_NEAR(ssim(a, b), 0.5 * (ssim(a0, b0) + ssim(a1, b1)), 1e-12);
}

// ---------------------------------------------------------------------------
// Image IO

TEST(ImageIO, EightBitRoundTripIsExact) {
  std::mt19937_64 rng(70);
  Tensor t({3, 7, 9});
  for (double& v : t.values()) v = static_cast<double>(rng() % 256) / 255.0;
  const std::string bytes = encode_pnm(t, 8);
  EXPECT_EQ(bytes.substr(0, 2), "P6");
  const Image back = decode_pnm(bytes);
  EXPECT_EQ(back.bit_depth, 8);
  EXPECT_EQ(max_abs_diff(back.pixels, t), 0.0);
  EXPECT_EQ(encode_pnm(back.pixels, 8), bytes);
}

TEST(ImageIO, SixteenBitKeepsEveryLevel) {
  Tensor t({1, 256, 256});
  for (std::size_t i = 0; i < 65536; ++i) t[i] = static_cast<double>(i) / 65535.0;
  const std::string bytes = encode_pnm(t, 16);
  EXPECT_EQ(bytes.substr(0, 2), "P5");
  const Image back = decode_pnm(bytes);
  EXPECT_EQ(back.bit_depth, 16);
  for (std::size_t i = 0; i < 65536; ++i) ASSERT_EQ(std::lround(back.pixels[i] * 65535.0), static_cast<long>(i));
  EXPECT_EQ(encode_pnm(back.pixels, 16), bytes);
}

TEST(ImageIO, FilesRoundTrip) {
  const fs::path dir = temp_dir("io");
  std::mt19937_64 rng(71);
  Tensor t({3, 5, 4});
  for (double& v : t.values()) v = static_cast<double>(rng() % 256) / 255.0;
  write_image(dir / "a.ppm", t);
  EXPECT_EQ(max_abs_diff(read_image(dir / "a.ppm").pixels, t), 0.0);
  EXPECT_THROW(read_image(dir / "missing.ppm"), Error);
  fs::remove_all(dir);
}

TEST(ImageIO, MalformedInputReportsOffset) {
  const std::string good = encode_pnm(Tensor({3, 4, 4}, 0.5), 8);
  try {
    (void)decode_pnm(good.substr(0, good.size() - 5));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_pnm("P3\n1 1\n255\n0 0 0"), ParseError);
  EXPECT_THROW(decode_pnm("P6\n4 4\n"), ParseError);
  EXPECT_THROW(decode_pnm("P6\n4 x\n255\n"), ParseError);
  EXPECT_THROW(decode_pnm(""), ParseError);
}

// ---------------------------------------------------------------------------
// Synthesis and manifests

TEST(Synth, DeterministicAndIndependentSamples) {
  SynthOptions s;
  s.count = 4;
  s.height = 20;
  s.width = 24;
  s.seed = 7;
  const auto a = make_dataset(s), b = make_dataset(s);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(max_abs_diff(a[i].sharp, b[i].sharp), 0.0);
    EXPECT_EQ(max_abs_diff(a[i].blurred, b[i].blurred), 0.0);
    EXPECT_EQ(a[i].spec, b[i].spec);
    EXPECT_EQ(max_abs_diff(make_pair(s, i).blurred, a[i].blurred), 0.0);
    EXPECT_GE(a[i].spec.length, 3u);
    EXPECT_LE(a[i].spec.length, 15u);
    for (double v : a[i].blurred.values()) EXPECT_TRUE(v >= 0 && v <= 1);
  }
  s.seed = 8;
  EXPECT_GT(max_abs_diff(make_dataset(s)[0].sharp, a[0].sharp), 0.0);
}

TEST(Synth, AnglesCycle) {
  SynthOptions s;
  s.count = 25;
  s.height = s.width = 16;
  s.angles = {0, 45, 90, 135};
  s.length = 11;
  const auto pairs = make_dataset(s);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(pairs[i].spec.angle, s.angles[i % 4]);
    EXPECT_EQ(pairs[i].spec.length, 11u);
  }
}

TEST(Synth, RejectsBadOptions) {
  SynthOptions s;
  s.min_length = 5;
  s.max_length = 4;
  EXPECT_THROW(make_dataset(s), ConfigError);
  s = {};
  s.angles = {180};
  EXPECT_THROW(make_dataset(s), ConfigError);
}

TEST(Manifest, WriteAndLoadDataset) {
  const fs::path dir = temp_dir("manifest");
  SynthOptions s;
  s.count = 3;
  s.height = 16;
  s.width = 20;
  s.seed = 9;
  write_dataset(dir, s);
  const auto records = read_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(records.size(), 3u);
  const auto pairs = load_dataset(dir / "manifest.jsonl");
  const auto direct = make_dataset(s);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(records[i].spec, direct[i].spec);
    EXPECT_LE(max_abs_diff(pairs[i].sharp, direct[i].sharp), 0.5 / 255.0 + 1e-12);
    EXPECT_EQ(pairs[i].spec, direct[i].spec);
  }
  // a broken line reports the byte offset where it starts
  const std::size_t size = fs::file_size(dir / "manifest.jsonl");
  std::ofstream(dir / "manifest.jsonl", std::ios::app) << "{\"index\": oops}\n";
  try {
    (void)read_manifest(dir / "manifest.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), size) << e.what();
  }
  fs::remove_all(dir);
}
