#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "cadeblur/core/errors.hpp"

namespace cadeblur {

enum class LossKind { mse, l1 };

inline LossKind parse_loss(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "l1") return LossKind::l1;
  throw ConfigError("loss must be mse or l1, got '" + s + "'");
}

inline const char* loss_name(LossKind k) { return k == LossKind::mse ? "mse" : "l1"; }

struct TrainConfig {
  std::size_t batch = 4;
  std::size_t patch = 64;
  double lr0 = 1e-4;
  std::size_t halving_interval = 2000;
  std::size_t iterations = 20000;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::mse;
  bool multi_level_loss = false;  // also supervise the level-2 and level-3 outputs
  bool random_crop = true;
  bool horizontal_flip = true;
  std::size_t log_interval = 100;
  std::size_t validate_interval = 1000;  // 0: validate only at the end
  std::size_t checkpoint_interval = 1000;  // 0: checkpoint only at the end
  std::size_t validation_limit = 0;  // 0: every held-out pair
  double grad_clip = 0.0;  // global gradient norm bound, 0: off
  double adam_eps = 1e-8;  // Adam denominator floor

  void validate() const {
    if (batch == 0 || patch == 0 || halving_interval == 0 || log_interval == 0) {
      throw ConfigError("batch, patch, halving_interval and log_interval must be positive");
    }
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive");
    if (!(grad_clip >= 0) || !std::isfinite(grad_clip)) throw ConfigError("grad_clip must be >= 0");
    if (!(adam_eps > 0) || !std::isfinite(adam_eps)) throw ConfigError("adam_eps must be > 0");
  }
};

/// lr0 * 2^-floor(iteration / interval).
inline double lr_schedule(std::size_t iteration, const TrainConfig& cfg) {
  return std::ldexp(cfg.lr0, -static_cast<int>(iteration / cfg.halving_interval));
}

}  // namespace cadeblur
