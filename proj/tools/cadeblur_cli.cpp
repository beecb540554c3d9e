// cadeblur command-line tool: dataset synthesis, training, inference,
// attention benchmarking, map dumps and the offset orientation experiment.
//
// Exit codes: 0 success, 1 usage/configuration/IO error, 2 numerical failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cadeblur/cadeblur.hpp"

namespace fs = std::filesystem;
using namespace cadeblur;

namespace {

bool g_verbose = false;

/// Options that must be set on the command line or in the config file.
std::vector<CLI::Option*> g_required;

CLI::Option* need(CLI::Option* opt) {
  g_required.push_back(opt);
  return opt;
}

void note(const std::string& msg) {
  if (g_verbose) std::cerr << msg << '\n';
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

/// Flat key=value file; '#' starts a comment. Keys are long option names of
/// the chosen subcommand (or global options) without the leading dashes.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return entries;
}

/// Fills options that were not given on the command line from the config file.
void apply_config(CLI::App& app, CLI::App& sub, const fs::path& path) {
  for (const auto& [key, value] : read_config_file(path)) {
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (!opt) opt = app.get_option_no_throw("--" + key);
    if (!opt || key == "config") throw ConfigError("unknown config key '" + key + "' in " + path.string());
    if (opt->count() > 0) continue;  // command line wins
    opt->add_result(value);
    opt->run_callback();
  }
}

struct NetworkFlags {
  int ablation = 8;
  std::size_t channels = 32;
  std::size_t resblocks = 3;
  std::size_t stages = 2;
  std::size_t clusters = 8;
  std::size_t pdf_kernel = 5;
  double delta_max = 8.0;

  void add(CLI::App* sub) {
    sub->add_option("--ablation", ablation, "Topology 1..8 of the ablation table (8 = full model)")
        ->check(CLI::Range(1, 8));
    sub->add_option("--channels", channels, "Base channel count")->check(CLI::PositiveNumber);
    sub->add_option("--resblocks", resblocks, "Resblocks per encoder and decoder")->check(CLI::PositiveNumber);
    sub->add_option("--stages", stages, "Stride-2 downsampling stages per encoder");
    sub->add_option("--clusters", clusters, "Attention clusters")->check(CLI::PositiveNumber);
    sub->add_option("--pdf-kernel", pdf_kernel, "Pixel-dependent filter size (odd)");
    sub->add_option("--delta-max", delta_max, "Offset magnitude bound");
  }

  NetworkConfig config() const {
    NetworkConfig c;
    c.base_channels = channels;
    c.resblocks = resblocks;
    c.down_stages = stages;
    c.clusters = clusters;
    c.pdf_kernel = pdf_kernel;
    c.delta_max = delta_max;
    c = NetworkConfig::ablation(ablation, c);
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string loss = "mse";
  bool no_flip = false;
  bool no_crop = false;

  void add(CLI::App* sub) {
    sub->add_option("--batch", cfg.batch, "Batch size")->check(CLI::PositiveNumber);
    sub->add_option("--patch", cfg.patch, "Training crop size")->check(CLI::PositiveNumber);
    sub->add_option("--lr", cfg.lr0, "Initial learning rate");
    sub->add_option("--halving-interval", cfg.halving_interval, "Iterations between learning-rate halvings");
    sub->add_option("--iterations", cfg.iterations, "Total iterations");
    sub->add_option("--grad-clip", cfg.grad_clip, "Global gradient norm bound (0: off)");
    sub->add_option("--adam-eps", cfg.adam_eps, "Adam denominator floor");
    sub->add_option("--loss", loss, "mse or l1")->check(CLI::IsMember({"mse", "l1"}));
    sub->add_flag("--multi-level-loss", cfg.multi_level_loss, "Also supervise the level 2 and 3 outputs");
    sub->add_flag("--no-flip", no_flip, "Disable horizontal flip augmentation");
    sub->add_flag("--no-crop", no_crop, "Use whole images instead of random crops");
    sub->add_option("--log-interval", cfg.log_interval, "Iterations per metrics record");
    sub->add_option("--validate-interval", cfg.validate_interval, "Iterations per validation (0: end only)");
    sub->add_option("--checkpoint-interval", cfg.checkpoint_interval, "Iterations per checkpoint (0: end only)");
    sub->add_option("--val-limit", cfg.validation_limit, "Validation pairs used (0: all)");
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.seed = seed;
    c.loss = parse_loss(loss);
    c.horizontal_flip = !no_flip;
    c.random_crop = !no_crop;
    c.validate();
    return c;
  }
};

std::vector<ImagePair> load_images(const fs::path& manifest) {
  auto pairs = load_dataset(manifest);
  note("loaded " + std::to_string(pairs.size()) + " pairs from " + manifest.string());
  return pairs;
}

std::unique_ptr<Network> network_from_checkpoint(const fs::path& path, TrainingState* state = nullptr) {
  const std::string bytes = read_file_bytes(path);
  auto net = std::make_unique<Network>(checkpoint_config(bytes));
  TrainingState s = decode_checkpoint(bytes, *net);
  if (state) *state = std::move(s);
  return net;
}

std::string fmt(double v, int precision = 4) {
  if (std::isinf(v)) return "inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

/// Reflect-pads [3,H,W] up to multiples of m.
Tensor pad_reflect(const Tensor& img, std::size_t m) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  Tensor out({c, ph, pw});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) {
        const auto sy = kernels::padded_index(static_cast<std::ptrdiff_t>(y), static_cast<std::ptrdiff_t>(h),
                                              kernels::Padding::reflect);
        const auto sx = kernels::padded_index(static_cast<std::ptrdiff_t>(x), static_cast<std::ptrdiff_t>(w),
                                              kernels::Padding::reflect);
        out[(ch * ph + y) * pw + x] = img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
  return out;
}

Tensor crop(const Tensor& img, std::size_t h, std::size_t w) {
  const std::size_t c = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * ih + y) * iw + x];
  return out;
}

std::vector<fs::path> image_files(const fs::path& p) {
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

// ---------------------------------------------------------------------------

struct SynthCmd {
  std::string out;
  std::size_t size = 64;
  std::size_t bits = 8;
  SynthOptions opt;
  std::vector<double> angles;
  std::size_t length = 0;

  void add(CLI::App* sub) {
    need(sub->add_option("--out", out, "Output directory"));
    sub->add_option("--count", opt.count, "Number of pairs");
    sub->add_option("--size", size, "Image height and width")->check(CLI::PositiveNumber);
    sub->add_option("--min-length", opt.min_length, "Shortest blur length");
    sub->add_option("--max-length", opt.max_length, "Longest blur length");
    sub->add_option("--length", length, "Fixed blur length (overrides the range)");
    sub->add_option("--angles", angles, "Comma-separated blur angles cycled over samples")->delimiter(',');
    sub->add_option("--noise", opt.noise_sigma, "Gaussian noise sigma");
    sub->add_option("--bits", bits, "Bits per sample of the written images")->check(CLI::IsMember({8, 16}));
  }

  int run(std::uint64_t seed) {
    opt.seed = seed;
    opt.height = opt.width = size;
    opt.angles = angles;
    if (length) opt.length = length;
    write_dataset(out, opt, static_cast<int>(bits));
    std::cout << "wrote " << opt.count << " pairs to " << out << '\n';
    return 0;
  }
};

struct TrainCmd {
  std::string manifest, val_manifest, out = "run";
  std::size_t val_count = 0;
  bool resume = false, zero_init = false;
  NetworkFlags net;
  TrainFlags train;

  void add(CLI::App* sub) {
    sub->add_option("--manifest", manifest, "Training manifest (from synth)");
    sub->add_option("--val-manifest", val_manifest, "Held-out manifest");
    sub->add_option("--val-count", val_count, "Hold out the last N training pairs when no held-out manifest");
    sub->add_option("--out", out, "Directory for model.ckpt and metrics.jsonl");
    sub->add_flag("--resume", resume, "Continue from <out>/model.ckpt");
    sub->add_flag("--zero-init", zero_init, "Write a checkpoint with all weights zero and exit");
    net.add(sub);
    train.add(sub);
  }

  int run(std::uint64_t seed) {
    const NetworkConfig nc = net.config();
    fs::create_directories(out);
    const fs::path ckpt = fs::path(out) / "model.ckpt";
    Network model(nc, seed);
    std::cout << "network parameters: " << model.parameter_count() << '\n';
    if (zero_init) {
      model.zero_weights();
      save_checkpoint(ckpt, model, {});
      std::cout << "wrote zero-weight checkpoint " << ckpt << '\n';
      return 0;
    }
    if (manifest.empty()) throw ConfigError("--manifest is required for training");
    std::vector<ImagePair> pairs = load_images(manifest), val;
    if (!val_manifest.empty()) {
      val = load_images(val_manifest);
    } else if (val_count) {
      if (val_count >= pairs.size()) throw ConfigError("--val-count leaves no training pairs");
      val.assign(pairs.end() - static_cast<std::ptrdiff_t>(val_count), pairs.end());
      pairs.resize(pairs.size() - val_count);
    }
    Trainer trainer(model, train.config(seed), std::move(pairs), std::move(val));
    if (resume && fs::exists(ckpt)) {
      trainer.load(ckpt);
      std::cout << "resumed at iteration " << trainer.iteration() << '\n';
    }
    const auto start = std::chrono::steady_clock::now();
    trainer.run(ckpt, fs::path(out) / "metrics.jsonl", [&](const MetricsRecord& r) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "iter " << r.iteration << " lr " << r.lr << " loss " << fmt(r.loss, 6);
      if (r.validation) {
        std::cout << " val_psnr " << fmt(r.validation->psnr) << " (input " << fmt(r.validation->input_psnr)
                  << ") val_ssim " << fmt(r.validation->ssim) << " (input " << fmt(r.validation->input_ssim) << ")";
      }
      std::cout << " [" << fmt(s, 1) << "s]" << std::endl;
    });
    return 0;
  }
};

struct DeblurCmd {
  std::string checkpoint, input, output, truth;
  bool pad = false;

  void add(CLI::App* sub) {
    need(sub->add_option("--checkpoint", checkpoint, "Model checkpoint"));
    need(sub->add_option("--input", input, "Blurred image or directory"));
    sub->add_option("--output", output, "Output image or directory (default: next to the input)");
    sub->add_option("--ground-truth", truth, "Sharp image or directory for PSNR/SSIM");
    sub->add_flag("--pad", pad, "Reflect-pad to a valid size and crop the result");
  }

  int run() {
    const auto net = network_from_checkpoint(checkpoint);
    const std::size_t m = net->config().size_multiple();
    const bool dir = fs::is_directory(input);
    for (const fs::path& in : image_files(input)) {
      const Image img = read_image(in);
      if (img.pixels.dim(0) != 3) throw DimensionError(in.string() + ": expected an RGB image");
      const std::size_t h = img.pixels.dim(1), w = img.pixels.dim(2);
      Tensor x = img.pixels;
      if (h % m != 0 || w % m != 0) {
        if (!pad) {
          net->check_size({1, 3, h, w});
        }
        x = pad_reflect(x, m);
      }
      const auto start = std::chrono::steady_clock::now();
      Tensor y = net->deblur(x);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (y.dim(1) != h || y.dim(2) != w) y = crop(y, h, w);

      fs::path out;
      if (output.empty()) {
        out = in.parent_path() / (in.stem().string() + "_deblurred" + in.extension().string());
      } else if (dir) {
        fs::create_directories(output);
        out = fs::path(output) / in.filename();
      } else {
        out = output;
      }
      write_image(out, y, img.bit_depth);
      std::cout << in.string() << " -> " << out.string() << "  " << h << "x" << w << "  " << fmt(seconds, 3) << " s";
      if (!truth.empty()) {
        const fs::path gt = fs::is_directory(truth) ? fs::path(truth) / in.filename() : fs::path(truth);
        const Tensor sharp = read_image(gt).pixels;
        std::cout << "  psnr " << fmt(psnr(y, sharp)) << " (input " << fmt(psnr(img.pixels, sharp)) << ")"
                  << "  ssim " << fmt(ssim(y, sharp)) << " (input " << fmt(ssim(img.pixels, sharp)) << ")";
      }
      std::cout << '\n';
    }
    return 0;
  }
};

struct BenchCmd {
  BenchOptions opt;
  std::string out;

  void add(CLI::App* sub) {
    sub->add_option("--sizes", opt.sizes, "Comma-separated H=W values")->delimiter(',');
    sub->add_option("--clusters", opt.clusters, "Comma-separated cluster counts")->delimiter(',');
    sub->add_option("--channels", opt.channels, "Feature channels")->check(CLI::PositiveNumber);
    sub->add_option("--repeats", opt.repeats, "Timings per point (median reported)")->check(CLI::PositiveNumber);
    sub->add_option("--max-positions", opt.max_positions, "Memory guard of the standard path (HW)");
    sub->add_option("--out", out, "Also write the table to this file");
  }

  int run(std::uint64_t seed) {
    opt.seed = seed;
    const auto rows = bench_attention(opt);
    std::ostringstream table;
    table << "| H=W | HW | C2 | efficient (ms) | standard (ms) | efficient largest buffer |\n"
          << "|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      table << "| " << r.size << " | " << r.size * r.size << " | " << r.clusters << " | "
            << fmt(r.efficient_seconds * 1e3, 3) << " | "
            << (r.standard_seconds ? fmt(*r.standard_seconds * 1e3, 3) : r.refusal) << " | "
            << r.efficient_largest_buffer << " |\n";
    }
    for (const auto& s : summarize_bench(rows)) {
      table << "\nC2=" << s.clusters << ": efficient linear fit R^2 = " << fmt(s.efficient.r2) << '\n';
      if (s.standard_loglog) table << "C2=" << s.clusters << ": standard log-log slope = " << fmt(s.standard_loglog->slope) << '\n';
      table << "C2=" << s.clusters << ": crossover = "
            << (s.crossover ? std::to_string(*s.crossover) + "x" + std::to_string(*s.crossover) : "none in range")
            << '\n';
      table << "C2=" << s.clusters << ": HW x HW buffer in efficient path: " << (s.no_quadratic_buffer ? "no" : "YES")
            << '\n';
    }
    std::cout << table.str();
    if (!out.empty()) {
      std::ofstream f(out);
      if (!f) throw Error("cannot write " + out);
      f << table.str();
    }
    return 0;
  }
};

struct DumpCmd {
  std::string checkpoint, input, out = "maps";
  int level = 1;
  bool decoder = false;
  std::size_t block = 0, cluster = 0;

  void add(CLI::App* sub) {
    need(sub->add_option("--checkpoint", checkpoint, "Model checkpoint"));
    need(sub->add_option("--input", input, "Image to run"));
    sub->add_option("--out", out, "Output directory");
    sub->add_option("--level", level, "Level of the probed block")->check(CLI::Range(1, 3));
    sub->add_flag("--decoder", decoder, "Probe a decoder block instead of an encoder block");
    sub->add_option("--block", block, "Resblock index");
    sub->add_option("--cluster", cluster, "Attention cluster to export");
  }

  int run() {
    const auto net = network_from_checkpoint(checkpoint);
    const Tensor img = read_image(input).pixels;
    Probe probe;
    probe.level = level;
    probe.decoder = decoder;
    probe.block = block;
    const auto maps = collect_maps(*net, img, probe, cluster);
    fs::create_directories(out);
    for (const MapImage& m : maps) {
      const fs::path path = fs::path(out) / (m.name + ".pgm");
      write_image(path, normalized_map(m), 8);
      std::cout << m.name << "  " << m.values.dim(0) << "x" << m.values.dim(1) << "  min " << fmt(m.min, 6)
                << "  max " << fmt(m.max, 6) << "  -> " << path.string() << '\n';
    }
    return 0;
  }
};

struct OffsetCmd {
  OffsetExperimentOptions opt;
  NetworkFlags net;
  TrainFlags train;
  std::string out;

  void add(CLI::App* sub) {
    sub->add_option("--angles", opt.angles, "PSF angles")->delimiter(',');
    sub->add_option("--length", opt.blur_length, "PSF length");
    sub->add_option("--train-images", opt.train_images, "Training images per angle");
    sub->add_option("--eval-images", opt.eval_images, "Held-out images per angle");
    sub->add_option("--size", opt.image_size, "Image height and width");
    sub->add_option("--probe-level", opt.probe.level, "Level of the measured block")->check(CLI::Range(1, 3));
    sub->add_flag("--probe-decoder", opt.probe.decoder, "Measure a decoder block");
    sub->add_option("--probe-block", opt.probe.block, "Resblock index of the measured block");
    sub->add_option("--out", out, "Also write the table to this file");
    net.add(sub);
    train.add(sub);
  }

  int run(std::uint64_t seed) {
    opt.seed = seed;
    opt.network = net.config();
    if (!opt.network.pdf_kernels || !opt.network.dynamic_offsets) {
      throw ConfigError("the offset experiment needs dynamic offsets (ablation 8)");
    }
    opt.train = train.config(seed);
    const OffsetReport rep = offset_experiment(opt, [&](double angle, const MetricsRecord& r) {
      note("angle " + fmt(angle, 0) + " iter " + std::to_string(r.iteration) + " loss " + fmt(r.loss, 6));
    });
    std::ostringstream table;
    table << "| PSF angle | measured angle | circular error |\n|---|---|---|\n";
    for (const auto& r : rep.rows) {
      table << "| " << fmt(r.psf_angle, 1) << " | " << (r.measured.isotropic ? "isotropic" : fmt(r.measured.degrees, 1))
            << " | " << fmt(r.error, 1) << " |\n";
    }
    table << "\ncircular correlation: " << fmt(rep.correlation) << '\n';
    std::cout << table.str();
    if (!out.empty()) {
      std::ofstream f(out);
      if (!f) throw Error("cannot write " + out);
      f << table.str();
    }
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Content-aware multi-patch image deblurring"};
  app.require_subcommand(1);
  int threads = 1;
  std::uint64_t seed = 0;
  std::string config;
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--config", config, "key=value file with defaults for the subcommand's options");
  app.add_flag("-v,--verbose", g_verbose, "Progress messages on stderr");

  SynthCmd synth;
  TrainCmd train;
  DeblurCmd deblur;
  BenchCmd bench;
  DumpCmd dump;
  OffsetCmd offsets;
  CLI::App* s_synth = app.add_subcommand("synth", "Generate a seeded blurred/sharp dataset");
  CLI::App* s_train = app.add_subcommand("train", "Train a network");
  CLI::App* s_deblur = app.add_subcommand("deblur", "Restore an image or a directory of images");
  CLI::App* s_bench = app.add_subcommand("bench-attn", "Time standard against efficient attention");
  CLI::App* s_dump = app.add_subcommand("dump-maps", "Export attention, fusion, offset and kernel maps");
  CLI::App* s_offset = app.add_subcommand("offset-experiment", "Offset orientation against PSF angle");
  synth.add(s_synth);
  train.add(s_train);
  deblur.add(s_deblur);
  bench.add(s_bench);
  dump.add(s_dump);
  offsets.add(s_offset);

  try {
    app.parse(argc, argv);
    CLI::App* sub = app.get_subcommands().front();
    if (!config.empty()) apply_config(app, *sub, config);
    for (CLI::Option* opt : g_required) {
      if (opt->count() == 0 && sub->get_option_no_throw(opt->get_name()) == opt) {
        throw ConfigError(opt->get_name() + " is required");
      }
    }
    set_thread_count(threads);
    if (sub == s_synth) return synth.run(seed);
    if (sub == s_train) return train.run(seed);
    if (sub == s_deblur) return deblur.run();
    if (sub == s_bench) return bench.run(seed);
    if (sub == s_dump) return dump.run();
    return offsets.run(seed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
