#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadeblur/data/metrics.hpp"
#include "cadeblur/data/synth.hpp"
#include "cadeblur/train/checkpoint.hpp"
#include "cadeblur/train/config.hpp"

namespace cadeblur {

struct Evaluation {
  double psnr = 0.0;        // restored vs sharp, mean over pairs
  double ssim = 0.0;
  double input_psnr = 0.0;  // blurred vs sharp
  double input_ssim = 0.0;
  std::size_t pairs = 0;
};

/// Mean quality of net.deblur over `pairs` (the first `limit` when non-zero).
inline Evaluation evaluate(const Network& net, const std::vector<ImagePair>& pairs, std::size_t limit = 0) {
  Evaluation e;
  const std::size_t n = limit ? std::min(limit, pairs.size()) : pairs.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor restored = net.deblur(pairs[i].blurred);
    e.psnr += psnr(restored, pairs[i].sharp);
    e.ssim += ssim(restored, pairs[i].sharp);
    e.input_psnr += psnr(pairs[i].blurred, pairs[i].sharp);
    e.input_ssim += ssim(pairs[i].blurred, pairs[i].sharp);
  }
  e.pairs = n;
  if (n) {
    const auto d = static_cast<double>(n);
    e.psnr /= d;
    e.ssim /= d;
    e.input_psnr /= d;
    e.input_ssim /= d;
  }
  return e;
}

struct MetricsRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean training loss since the previous record
  std::optional<Evaluation> validation;
};

inline std::string metrics_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["val_psnr"] = r.validation ? nlohmann::ordered_json(r.validation->psnr) : nlohmann::ordered_json(nullptr);
  j["val_ssim"] = r.validation ? nlohmann::ordered_json(r.validation->ssim) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

/// Seeded training loop. Single-threaded runs are bit-reproducible, and a
/// run resumed from a checkpoint continues the uninterrupted loss sequence.
class Trainer {
 public:
  Trainer(Network& net, TrainConfig cfg, std::vector<ImagePair> train, std::vector<ImagePair> validation = {})
      : net_(net), cfg_(cfg), train_(std::move(train)), validation_(std::move(validation)), rng_(cfg.seed) {
    cfg_.validate();
    if (train_.empty()) throw ConfigError("training set is empty");
    const std::size_t m = net_.config().size_multiple();
    if (cfg_.patch % m != 0) {
      throw ConfigError("patch size " + std::to_string(cfg_.patch) + " must be a multiple of " + std::to_string(m));
    }
    for (const ImagePair& p : train_) {
      const bool fits = cfg_.random_crop ? p.sharp.dim(1) >= cfg_.patch && p.sharp.dim(2) >= cfg_.patch
                                         : p.sharp.dim(1) == cfg_.patch && p.sharp.dim(2) == cfg_.patch;
      if (!fits) throw ConfigError("training image " + shape_string(p.sharp.shape()) + " does not fit patch size");
    }
    params_ = net_.parameters().all();
    adam_.reset(params_);
  }

  std::size_t iteration() const noexcept { return iteration_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  const std::vector<double>& losses() const noexcept { return losses_; }
  /// Global gradient norm of the last step, before clipping.
  double last_grad_norm() const noexcept { return last_grad_norm_; }

  /// One optimisation step on a freshly sampled batch; returns its loss.
  double step() {
    auto [blurred, sharp] = sample_batch();
    net_.parameters().zero_grad();
    Tape t;
    const ForwardResult fr = net_.forward(t, t.constant(std::move(blurred)));
    Var target = t.constant(std::move(sharp));
    Var loss = loss_of(fr.output, target);
    if (cfg_.multi_level_loss) {
      loss = ops::add(loss, loss_of(fr.levels[1], target));
      loss = ops::add(loss, loss_of(fr.levels[2], target));
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericalError("training diverged at iteration " + std::to_string(iteration_) + " (loss is not finite)");
    }
    t.backward(loss);
    last_grad_norm_ = clip_gradients();
    adam_step(params_, adam_, lr_schedule(iteration_, cfg_), AdamOptions{.eps = cfg_.adam_eps});
    ++iteration_;
    losses_.push_back(value);
    return value;
  }

  /// Trains until cfg.iterations. Checkpoints are written atomically, so a
  /// divergence leaves the last good one in place.
  void run(const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
           const std::optional<std::filesystem::path>& metrics = std::nullopt,
           const std::function<void(const MetricsRecord&)>& on_record = {}) {
    std::ofstream log;
    if (metrics) {
      log.open(*metrics, std::ios::app);
      if (!log) throw Error("cannot open metrics log " + metrics->string());
    }
    double window = 0.0;
    std::size_t window_count = 0;
    while (iteration_ < cfg_.iterations) {
      const double lr = lr_schedule(iteration_, cfg_);
      window += step();
      ++window_count;
      const bool last = iteration_ == cfg_.iterations;
      if (iteration_ % cfg_.log_interval == 0 || last) {
        MetricsRecord rec{iteration_, lr, window / static_cast<double>(window_count), std::nullopt};
        const bool validate_now =
            !validation_.empty() && (last || (cfg_.validate_interval && iteration_ % cfg_.validate_interval == 0));
        if (validate_now) rec.validation = evaluate(net_, validation_, cfg_.validation_limit);
        if (log) log << metrics_line(rec) << '\n' << std::flush;
        if (on_record) on_record(rec);
        window = 0.0;
        window_count = 0;
      }
      if (checkpoint && (last || (cfg_.checkpoint_interval && iteration_ % cfg_.checkpoint_interval == 0))) {
        save_checkpoint(*checkpoint, net_, state());
      }
    }
  }

  TrainingState state() const {
    std::ostringstream rng;
    rng << rng_;
    return {iteration_, rng.str(), adam_};
  }

  void restore(TrainingState s) {
    std::istringstream in(s.rng_state);
    in >> rng_;
    if (!in) throw ParseError("bad RNG state in checkpoint", 0);
    iteration_ = s.iteration;
    if (s.adam.m.empty()) {
      adam_.reset(params_);
      adam_.step = s.adam.step;
    } else {
      adam_ = std::move(s.adam);
    }
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, net_, state()); }
  void load(const std::filesystem::path& path) { restore(load_checkpoint(path, net_)); }

 private:
  double clip_gradients() {
    double ss = 0.0;
    for (const Parameter* p : params_)
      for (double g : p->grad.values()) ss += g * g;
    const double norm = std::sqrt(ss);
    if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) {
      const double scale = cfg_.grad_clip / norm;
      for (Parameter* p : params_)
        for (double& g : p->grad.values()) g *= scale;
    }
    return norm;
  }

  Var loss_of(Var prediction, Var target) const {
    return cfg_.loss == LossKind::mse ? ops::mse_loss(prediction, target) : ops::l1_loss(prediction, target);
  }

  std::pair<Tensor, Tensor> sample_batch() {
    const std::size_t p = cfg_.patch;
    Tensor blurred({cfg_.batch, 3, p, p}), sharp({cfg_.batch, 3, p, p});
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
      const ImagePair& pair = train_[rng_() % train_.size()];
      const std::size_t h = pair.sharp.dim(1), w = pair.sharp.dim(2);
      std::size_t y0 = 0, x0 = 0;
      if (cfg_.random_crop) {
        y0 = rng_() % (h - p + 1);
        x0 = rng_() % (w - p + 1);
      }
      const bool flip = cfg_.horizontal_flip && (rng_() & 1);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) {
            const std::size_t sx = x0 + (flip ? p - 1 - x : x);
            const std::size_t src = (c * h + y0 + y) * w + sx;
            const std::size_t dst = ((b * 3 + c) * p + y) * p + x;
            blurred[dst] = pair.blurred[src];
            sharp[dst] = pair.sharp[src];
          }
    }
    return {std::move(blurred), std::move(sharp)};
  }

  Network& net_;
  TrainConfig cfg_;
  std::vector<ImagePair> train_;
  std::vector<ImagePair> validation_;
  std::mt19937_64 rng_;
  std::vector<Parameter*> params_;
  AdamState adam_;
  std::size_t iteration_ = 0;
  std::vector<double> losses_;
  double last_grad_norm_ = 0.0;
};

}  // namespace cadeblur
