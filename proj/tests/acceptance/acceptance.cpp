// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.
//
// The training criteria (6, 7, 8) train through checkpoints under --run-dir
// and resume from whatever is already there, so an interrupted run continues
// and a completed one is only re-evaluated.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "cadeblur/cadeblur.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace cadeblur;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kAttentionTol = 1e-8;
constexpr std::size_t kAttentionShapes = 120;
constexpr double kLinearR2 = 0.98;
constexpr double kSlopeLow = 1.7, kSlopeHigh = 2.3;
constexpr double kPdfConvTol = 1e-12;
constexpr std::size_t kPdfInstances = 20;
constexpr double kGradTol = 1e-4;
constexpr double kPsnrGain = 1.5;
constexpr double kSsimGain = 0.02;
constexpr std::size_t kHeldOut = 50;
constexpr std::size_t kDeskIterations = 20000;
constexpr std::size_t kAblationIterations = 5000;
constexpr double kAblationRegression = 0.2;
constexpr double kOrientationCorrelation = 0.8;
constexpr double kOrientationError = 30.0;
constexpr double kNormalizationTol = 1e-9;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

fs::path g_run_dir = "acceptance_runs";
bool g_verbose = false;

void note(const std::string& s) {
  if (g_verbose) std::cerr << "  " << s << std::endl;
}

// ---------------------------------------------------------------------------

Outcome attention_equivalence() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (std::size_t i = 0; i < kAttentionShapes; ++i) {
    const std::size_t n = 1 + rng() % 2, c = 1 + rng() % 6, c2 = 1 + rng() % 5;
    const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9;
    const bool cross = i % 4 == 3;
    ParameterStore store;
    const AttentionParams p =
        make_attention(store, "a", {c, c2, cross ? AttentionVariant::cross : AttentionVariant::self}, rng);
    for (Parameter* q : store.all()) q->value = testkit::uniform_tensor(q->value.shape(), rng);
    const Tensor x = testkit::uniform_tensor({n, c, h, w}, rng, -2, 2);
    const Tensor s = cross ? testkit::uniform_tensor({n, c, h, w}, rng, -2, 2) : x;
    Tape t(false);
    Var xv = t.constant(x), sv = cross ? t.constant(s) : xv;
    const Tensor matrix = (cross ? cross_attention(t, p, sv, xv) : efficient_attention(t, p, xv)).output.value();
    const Tensor stepwise = (cross ? cross_attention_stepwise(t, p, sv, xv) : efficient_attention_stepwise(t, p, xv))
                                .output.value();
    const Tensor oracle = testkit::attention_oracle(p, s, x);
    worst = std::max({worst, max_abs_diff(matrix, stepwise), max_abs_diff(stepwise, oracle),
                      max_abs_diff(matrix, oracle)});
  }
  return {worst < kAttentionTol, std::to_string(kAttentionShapes) + " shapes, max |matrix - stepwise|, |. - oracle| = " +
                                     fmt("%.3g", worst) + " (tol 1e-8)"};
}

Outcome complexity() {
  BenchOptions opt;
  const auto rows = bench_attention(opt);
  const auto summary = summarize_bench(rows).front();
  const double slope = summary.standard_loglog ? summary.standard_loglog->slope : NAN;
  bool audit = summary.no_quadratic_buffer;
  for (const BenchRow& r : rows) {
    note("H=W=" + std::to_string(r.size) + " efficient " + fmt("%.5f", r.efficient_seconds) + " s, standard " +
         (r.standard_seconds ? fmt("%.5f", *r.standard_seconds) + " s" : r.refusal) + ", largest efficient buffer " +
         std::to_string(r.efficient_largest_buffer));
    audit = audit && r.efficient_largest_buffer < r.size * r.size * r.size * r.size;
  }
  const bool pass = summary.efficient.r2 >= kLinearR2 && slope >= kSlopeLow && slope <= kSlopeHigh && audit;
  return {pass, "efficient linear R2 = " + fmt("%.4f", summary.efficient.r2) + " (>= 0.98), standard log-log slope = " +
                    fmt("%.3f", slope) + " (in [1.7, 2.3]), no HWxHW buffer: " + (audit ? "yes" : "no")};
}

Outcome pdf_special_case() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (std::size_t i = 0; i < kPdfInstances; ++i) {
    const std::size_t n = 1 + rng() % 2, c = 1 + rng() % 5, k = 1 + 2 * (rng() % 3);
    const std::size_t h = 1 + rng() % 12, w = 1 + rng() % 12;
    const Tensor x = testkit::uniform_tensor({n, c, h, w}, rng);
    const Tensor weight = testkit::uniform_tensor({c, c, k, k}, rng);
    const Tensor v({n, k * k, h, w}, 1.0);
    const Tensor delta({n, 2 * k * k, h, w}, 0.0);
    const Tensor y = kernels::pdf_forward(x, v, delta, weight);
    const Tensor conv = kernels::conv2d(x, weight, nullptr, 1, kernels::Padding::zero);
    worst = std::max(worst, max_abs_diff(y, conv));
  }
  return {worst < kPdfConvTol,
          std::to_string(kPdfInstances) + " instances, max |pdf - conv2d| = " + fmt("%.3g", worst) + " (tol 1e-12)"};
}

Outcome gradient_integrity() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  auto take = [&](const std::string& name, const GradCheckResult& r) {
    note(name + ": " + fmt("%.3g", r.max_rel_error) + " over " + std::to_string(r.coordinates) + " coordinates");
    ++checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name + " (" + r.worst_parameter + ")";
    }
  };
  for (const auto& c : testkit::op_cases()) take(c.name, testkit::check_op(c));
  for (const auto& m : testkit::module_cases()) take(m.name, m.run());
  GradCheckOptions opt;
  opt.samples = 6;
  take("network Cb=8 3x32x32", testkit::check_network(8, 32, opt));
  return {worst < kGradTol, std::to_string(checked) + " checks incl. full network Cb=8 on 3x32x32, worst rel err " +
                                fmt("%.3g", worst) + " in " + worst_name + " (tol 1e-4)"};
}

Outcome residual_identity() {
  std::mt19937_64 rng(505);
  double worst = 0.0;
  std::size_t cases = 0;
  for (int net_id : {1, 4, 8}) {
    NetworkConfig cfg = NetworkConfig::ablation(net_id);
    cfg.base_channels = 8;
    Network net(cfg, 9);
    net.zero_weights();
    for (std::size_t size : {16, 32, 48}) {
      const Tensor img = testkit::uniform_tensor({2, 3, size, size + 16}, rng, -0.5, 1.5);
      Tape t(false);
      worst = std::max(worst, max_abs_diff(net.forward(t, t.constant(img)).output.value(), img));
      ++cases;
    }
  }
  return {worst == 0.0, std::to_string(cases) + " images through zero-weight networks, max |out - in| = " +
                            fmt("%.3g", worst) + " (must be exactly 0)"};
}

// ---------------------------------------------------------------------------
// Training criteria

std::vector<ImagePair> desk_train_set() {
  SynthOptions s;
  s.count = 400;
  s.height = s.width = 80;
  s.seed = 6001;
  return make_dataset(s);
}

std::vector<ImagePair> desk_held_out() {
  SynthOptions s;
  s.count = kHeldOut;
  s.height = s.width = 64;
  s.seed = 6002;
  return make_dataset(s);
}

TrainConfig desk_train_config(std::size_t iterations, std::size_t halving) {
  TrainConfig tc;
  tc.batch = 1;
  tc.patch = 64;
  tc.lr0 = 1e-4;
  tc.halving_interval = halving;
  tc.iterations = iterations;
  tc.seed = 77;
  tc.log_interval = 100;
  tc.validate_interval = 1000;
  tc.validation_limit = 10;
  tc.checkpoint_interval = 250;
  return tc;
}

/// Trains `net` to cfg.iterations through dir/model.ckpt, resuming when the
/// checkpoint exists.
void train_resumable(Network& net, const TrainConfig& tc, std::vector<ImagePair> train,
                     std::vector<ImagePair> val, const fs::path& dir) {
  fs::create_directories(dir);
  Trainer trainer(net, tc, std::move(train), std::move(val));
  const fs::path ckpt = dir / "model.ckpt";
  if (fs::exists(ckpt)) {
    trainer.load(ckpt);
    note("resumed " + ckpt.string() + " at iteration " + std::to_string(trainer.iteration()));
  }
  trainer.run(ckpt, dir / "metrics.jsonl", [&](const MetricsRecord& r) {
    if (r.validation) {
      note(dir.filename().string() + " it " + std::to_string(r.iteration) + " loss " + fmt("%.6f", r.loss) +
           " val psnr " + fmt("%.3f", r.validation->psnr) + " (input " + fmt("%.3f", r.validation->input_psnr) + ")");
    }
  });
}

Outcome desk_restoration() {
  NetworkConfig cfg = NetworkConfig::ablation(8);
  cfg.base_channels = 32;
  Network net(cfg, 1);
  const auto val = desk_held_out();
  train_resumable(net, desk_train_config(kDeskIterations, 5000), desk_train_set(),
                  std::vector<ImagePair>(val.begin(), val.end()), g_run_dir / "desk");
  const Evaluation e = evaluate(net, val);
  const double dp = e.psnr - e.input_psnr, ds = e.ssim - e.input_ssim;
  return {dp >= kPsnrGain && ds > kSsimGain,
          std::to_string(e.pairs) + " held-out pairs after " + std::to_string(kDeskIterations) +
              " iterations: PSNR " + fmt("%.3f", e.input_psnr) + " -> " + fmt("%.3f", e.psnr) + " dB (gain " +
              fmt("%+.3f", dp) + ", need >= 1.5), SSIM " + fmt("%.4f", e.input_ssim) + " -> " + fmt("%.4f", e.ssim) +
              " (gain " + fmt("%+.4f", ds) + ", need > 0.02)"};
}

Outcome ablation_trend() {
  const auto val = desk_held_out();
  const std::vector<int> nets{1, 3, 4, 6};
  std::map<int, double> psnr_of;
  std::ostringstream table;
  table << "\n    | net | SA | CA | CLA | kernels | offsets | held-out PSNR | SSIM |";
  for (int id : nets) {
    NetworkConfig cfg = NetworkConfig::ablation(id);
    cfg.base_channels = 32;
    Network net(cfg, 1);
    train_resumable(net, desk_train_config(kAblationIterations, 2000), desk_train_set(), {},
                    g_run_dir / ("ablation_net" + std::to_string(id)));
    const Evaluation e = evaluate(net, val);
    psnr_of[id] = e.psnr;
    auto yn = [](bool b) { return b ? "x" : " "; };
    table << "\n    | Net" << id << " | " << yn(cfg.self_attention) << " | " << yn(cfg.cross_attention) << " | "
          << yn(cfg.cross_level_attention) << " | " << yn(cfg.pdf_kernels) << " | " << yn(cfg.dynamic_offsets)
          << " | " << fmt("%.3f", e.psnr) << " | " << fmt("%.4f", e.ssim) << " |";
  }
  const double gap = psnr_of[6] - psnr_of[1];
  double worst_step = 0.0;
  for (std::size_t i = 1; i < nets.size(); ++i) worst_step = std::min(worst_step, psnr_of[nets[i]] - psnr_of[nets[i - 1]]);
  const bool pass = gap >= 0.0 && worst_step >= -kAblationRegression;
  return {pass, "Net6 - Net1 = " + fmt("%+.3f", gap) + " dB (need >= 0), worst step " + fmt("%+.3f", worst_step) +
                    " dB (need >= -0.2)" + table.str()};
}

Outcome orientation_correlation() {
  OffsetExperimentOptions opt;
  opt.network.base_channels = 16;
  opt.train.batch = 1;
  opt.train.patch = 64;
  opt.train.iterations = 4000;
  opt.train.halving_interval = 2000;
  opt.train.checkpoint_interval = 250;
  opt.train.random_crop = false;
  opt.seed = 8008;
  opt.run_dir = g_run_dir / "offsets";
  const OffsetReport rep = offset_experiment(opt);
  std::ostringstream table;
  double worst = 0.0;
  bool isotropic = false;
  table << "\n    | PSF angle | measured | circular error |";
  for (const OffsetRow& r : rep.rows) {
    table << "\n    | " << fmt("%.0f", r.psf_angle) << " | "
          << (r.measured.isotropic ? std::string("isotropic") : fmt("%.1f", r.measured.degrees)) << " | "
          << fmt("%.1f", r.error) << " |";
    isotropic = isotropic || r.measured.isotropic;
    worst = std::max(worst, r.error);
  }
  const bool pass = !isotropic && rep.correlation > kOrientationCorrelation && worst < kOrientationError;
  return {pass, "circular correlation " + fmt("%.3f", rep.correlation) + " (need > 0.8), worst error " +
                    fmt("%.1f", worst) + " deg (need < 30)" + table.str()};
}

// ---------------------------------------------------------------------------

Outcome normalization_invariants() {
  // Forward passes over attention blocks of every shape class used above,
  // the content-aware blocks and whole networks, with the monitor on.
  NormalizationMonitor::reset();
  NormalizationMonitor::enable(true);
  std::mt19937_64 rng(909);
  for (std::size_t i = 0; i < 60; ++i) {
    const std::size_t c = 1 + rng() % 8, c2 = 1 + rng() % 8, h = 1 + rng() % 16, w = 1 + rng() % 16;
    ParameterStore store;
    const AttentionParams p = make_attention(store, "a", {c, c2, AttentionVariant::self}, rng);
    for (Parameter* q : store.all()) q->value = testkit::uniform_tensor(q->value.shape(), rng, -3, 3);
    Tape t(false);
    Var x = t.constant(testkit::uniform_tensor({2, c, h, w}, rng, -5, 5));
    (void)efficient_attention(t, p, x);
    (void)efficient_attention_stepwise(t, p, x);
    (void)cross_attention(t, p, t.constant(testkit::uniform_tensor({2, c, h, w}, rng)), x);
  }
  for (int id : {3, 4, 5, 7, 8}) {
    NetworkConfig cfg = NetworkConfig::ablation(id);
    cfg.base_channels = 8;
    Network net(cfg, 2);
    (void)net.deblur(testkit::uniform_tensor({3, 32, 48}, rng, 0, 1));
  }
  (void)attention_equivalence();
  (void)testkit::check_network(8, 32, GradCheckOptions{1e-5, 1, 7});
  NormalizationMonitor::enable(false);
  const double dev = NormalizationMonitor::max_deviation();
  const std::size_t passes = NormalizationMonitor::passes();
  return {passes > 0 && dev < kNormalizationTol, std::to_string(passes) +
                                                     " attention forward passes, max |sum - 1| = " + fmt("%.3g", dev) +
                                                     " (tol 1e-9)"};
}

Outcome checkpoint_determinism() {
  set_thread_count(1);
  NetworkConfig cfg = NetworkConfig::ablation(8);
  cfg.base_channels = 8;
  SynthOptions s;
  s.count = 6;
  s.height = s.width = 40;
  s.seed = 1010;
  const auto pairs = make_dataset(s);
  TrainConfig tc;
  tc.batch = 2;
  tc.patch = 32;
  tc.iterations = 8;
  tc.seed = 3;
  tc.lr0 = 1e-3;
  tc.halving_interval = 3;

  // Uninterrupted run.
  Network a(cfg, 4);
  Trainer ta(a, tc, pairs);
  for (int i = 0; i < 8; ++i) ta.step();

  // Interrupted after 4 steps, checkpointed, resumed in a fresh network.
  const fs::path dir = fs::temp_directory_path() / ("cadeblur_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  Network b(cfg, 4);
  Trainer tb(b, tc, pairs);
  for (int i = 0; i < 4; ++i) tb.step();
  tb.save(dir / "a.ckpt");
  Network c(cfg, 99);
  Trainer tcn(c, tc, pairs);
  tcn.load(dir / "a.ckpt");
  tcn.save(dir / "b.ckpt");
  const bool bytes_equal = read_file_bytes(dir / "a.ckpt") == read_file_bytes(dir / "b.ckpt");
  std::vector<double> resumed(tb.losses());
  for (int i = 0; i < 4; ++i) resumed.push_back(tcn.step());
  fs::remove_all(dir);

  bool curve_equal = resumed.size() == ta.losses().size();
  for (std::size_t i = 0; curve_equal && i < resumed.size(); ++i) curve_equal = resumed[i] == ta.losses()[i];
  bool params_equal = true;
  const auto pa = a.parameters().all(), pc = c.parameters().all();
  for (std::size_t i = 0; i < pa.size(); ++i) params_equal = params_equal && max_abs_diff(pa[i]->value, pc[i]->value) == 0.0;
  return {bytes_equal && curve_equal && params_equal,
          std::string("save/load/save byte-identical: ") + (bytes_equal ? "yes" : "no") +
              ", resumed loss curve identical over 8 steps: " + (curve_equal ? "yes" : "no") +
              ", final parameters identical: " + (params_equal ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cadeblur acceptance checks"};
  std::vector<int> selected;
  std::string run_dir = g_run_dir.string();
  app.add_option("-c,--criterion", selected, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--run-dir", run_dir, "directory for the training runs of criteria 6-8");
  app.add_flag("-v,--verbose", g_verbose, "print measurements as they are taken");
  CLI11_PARSE(app, argc, argv);
  g_run_dir = run_dir;
  set_thread_count(1);

  const std::vector<Criterion> all{
      {1, "attention equivalence", attention_equivalence},
      {2, "attention complexity", complexity},
      {3, "PDF reduces to convolution", pdf_special_case},
      {4, "gradient integrity", gradient_integrity},
      {5, "residual identity", residual_identity},
      {6, "desk-scale restoration", desk_restoration},
      {7, "ablation trend", ablation_trend},
      {8, "offset orientation correlation", orientation_correlation},
      {9, "normalization invariants", normalization_invariants},
      {10, "checkpoint and determinism", checkpoint_determinism},
  };
  if (selected.empty()) {
    for (const auto& c : all) selected.push_back(c.id);
  }
  bool ok = true;
  for (const auto& c : all) {
    if (std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << c.id << " [" << c.name << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << " (" << fmt("%.1f", secs) << " s)" << std::endl;
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
