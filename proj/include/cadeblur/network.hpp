#pragma once

// Three-level patch hierarchy. Level 3 sees the image as a 2x2 grid of
// patches, level 2 as top/bottom halves and level 1 as a whole. Every level
// is an encoder-decoder of residual content-aware blocks that predicts a
// residual added to its input. Bottleneck decoder features of a lower level
// are regrouped to the next level's patch layout and injected into its
// encoder output through cross-level attention.
//
// Encoder: head conv, then resblocks spread over S+1 resolution stages with a
// stride-2 conv between stages. The decoder mirrors it (bilinear x2 upsample
// + conv between stages) and its blocks cross-attend to the encoder block of
// the same stage, deepest first. Patch batches are stacked along N.

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cadeblur/content_aware.hpp"

namespace cadeblur {

constexpr int kLevels = 3;

struct PatchGrid {
  std::size_t rows, cols;
};

inline PatchGrid patch_grid(int level) {
  switch (level) {
    case 1: return {1, 1};
    case 2: return {2, 1};
    case 3: return {2, 2};
    default: throw ConfigError("level must be 1, 2 or 3, got " + std::to_string(level));
  }
}

struct NetworkConfig {
  std::size_t base_channels = 32;
  std::size_t resblocks = 3;
  std::size_t down_stages = 2;
  std::size_t clusters = 8;
  std::size_t pdf_kernel = 5;
  double delta_max = 8.0;

  bool self_attention = true;
  bool cross_attention = true;        // encoder-decoder CA in decoder blocks
  bool cross_level_attention = true;  // otherwise lower features are added
  bool pdf_kernels = true;
  bool dynamic_offsets = true;        // otherwise one learned offset per tap

  /// Image height and width must be multiples of this.
  std::size_t size_multiple() const { return std::size_t{4} << down_stages; }

  void validate() const {
    if (base_channels == 0 || resblocks == 0 || clusters == 0) {
      throw ConfigError("network channels, resblocks and clusters must be >= 1");
    }
    if (pdf_kernel % 2 == 0) throw ConfigError("PDF kernel size must be odd");
    if (!(delta_max >= 0)) throw ConfigError("delta_max must be >= 0");
  }

  /// Topologies of the ablation table: 1 = plain resblocks, 2 = kernels,
  /// 3 = SA, 4 = SA+CA, 5 = SA+CLA, 6 = SA+CA+kernels, 7 = +CLA,
  /// 8 = +dynamic offsets. Without the offset flag, offsets are learned per tap.
  static NetworkConfig ablation(int net);
  static NetworkConfig ablation(int net, NetworkConfig base);

  bool operator==(const NetworkConfig&) const = default;
};

inline NetworkConfig NetworkConfig::ablation(int net) { return ablation(net, NetworkConfig{}); }

inline NetworkConfig NetworkConfig::ablation(int net, NetworkConfig base) {
  struct Row {
    bool sa, ca, cla, kernel, offset;
  };
  static constexpr Row rows[] = {{false, false, false, false, false}, {false, false, false, true, false},
                                 {true, false, false, false, false},  {true, true, false, false, false},
                                 {true, false, true, false, false},   {true, true, false, true, false},
                                 {true, true, true, true, false},     {true, true, true, true, true}};
  if (net < 1 || net > 8) throw ConfigError("ablation index must be in 1..8");
  const Row& r = rows[net - 1];
  base.self_attention = r.sa;
  base.cross_attention = r.ca;
  base.cross_level_attention = r.cla;
  base.pdf_kernels = r.kernel;
  base.dynamic_offsets = r.offset;
  return base;
}

struct LevelParams {
  ConvLayer head;  // 3 -> C
  std::vector<ResBlockParams> encoder;
  std::vector<ConvLayer> down;  // stride 2
  std::optional<AttentionParams> cross_level;
  std::optional<ConvLayer> cross_level_out;  // 1x1 projection of the injected feature
  std::vector<ResBlockParams> decoder;
  std::vector<ConvLayer> up;  // after each x2 upsample
  ConvLayer tail;             // C -> 3
};

/// Selects one content-aware block whose intermediate maps are captured.
struct Probe {
  int level = 1;
  bool decoder = false;
  std::size_t block = 0;
  std::optional<CAPResult> result;
};

struct LevelResult {
  Var restored;  // [N,3,H,W]
  Var features;  // bottleneck decoder features in this level's patch layout
};

struct ForwardResult {
  Var output;                       // level-1 restoration (not clamped)
  std::array<Var, kLevels> levels;  // restorations of levels 1, 2, 3
};

class Network {
 public:
  explicit Network(NetworkConfig cfg, std::uint64_t seed = 1) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    for (int level = kLevels; level >= 1; --level) levels_[level - 1] = build_level(level, rng);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ParameterStore& parameters() noexcept { return store_; }
  const ParameterStore& parameters() const noexcept { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }
  const LevelParams& level(int level) const { return levels_.at(static_cast<std::size_t>(level - 1)); }

  void zero_weights() { store_.zero_values(); }

  /// Resolution stage of resblock i (0 = full patch resolution).
  std::size_t stage_of(std::size_t block) const {
    return std::min(cfg_.down_stages, block * (cfg_.down_stages + 1) / cfg_.resblocks);
  }

  void check_size(const Shape& s) const {
    if (s.size() != 4 || s[1] != 3) throw DimensionError("network input must be [N,3,H,W], got " + shape_string(s));
    const std::size_t m = cfg_.size_multiple();
    if (s[2] % m != 0 || s[3] % m != 0) {
      const std::size_t ph = (s[2] + m - 1) / m * m, pw = (s[3] + m - 1) / m * m;
      throw ConfigError("image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                        " is not divisible by " + std::to_string(m) + "; pad to " + std::to_string(ph) + "x" +
                        std::to_string(pw));
    }
  }

  LevelResult level_forward(Tape& t, Var image, std::optional<Var> lower, int level, Probe* probe = nullptr) const {
    check_size(image.shape());
    const LevelParams& lp = levels_.at(static_cast<std::size_t>(level - 1));
    const PatchGrid grid = patch_grid(level);
    if (level < kLevels && !lower) throw ConfigError("levels 1 and 2 need features from the level below");
    if (level == kLevels && lower) throw ConfigError("level 3 takes no lower-level features");

    Var patches = ops::split_patches(image, grid.rows, grid.cols);
    Var h = lp.head(t, patches);
    std::vector<Var> skips;
    for (std::size_t stage = 0, b = 0; stage <= cfg_.down_stages; ++stage) {
      for (; b < cfg_.resblocks && stage_of(b) == stage; ++b) {
        h = resblock_forward(t, lp.encoder[b], h, std::nullopt, probe_slot(probe, level, false, b));
        skips.push_back(h);
      }
      if (stage < cfg_.down_stages) h = ops::relu(lp.down[stage](t, h));
    }

    if (lower) {
      const PatchGrid from = patch_grid(level + 1);
      Var merged = ops::split_patches(ops::merge_patches(*lower, from.rows, from.cols), grid.rows, grid.cols);
      if (merged.shape() != h.shape()) {
        throw DimensionError("lower-level features " + shape_string(merged.shape()) +
                             " do not match the encoder output " + shape_string(h.shape()));
      }
      if (lp.cross_level) {
        Var injected = cross_attention(t, *lp.cross_level, merged, h).output;
        h = ops::add(h, (*lp.cross_level_out)(t, injected));
      } else {
        h = ops::add(h, merged);
      }
    }

    Var features = h;
    for (std::size_t s = 0; s <= cfg_.down_stages; ++s) {
      const std::size_t stage = cfg_.down_stages - s;
      for (std::size_t i = 0; i < cfg_.resblocks; ++i) {
        const std::size_t enc = cfg_.resblocks - 1 - i;
        if (stage_of(enc) != stage) continue;
        std::optional<Var> source;
        if (lp.decoder[i].cap.decoder()) source = skips[enc];
        h = resblock_forward(t, lp.decoder[i], h, source, probe_slot(probe, level, true, i));
      }
      if (stage == cfg_.down_stages) features = h;
      if (stage > 0) h = ops::relu(lp.up[s](t, ops::upsample2x(h)));
    }

    Var residual = lp.tail(t, h);
    Var restored = ops::merge_patches(ops::add(patches, residual), grid.rows, grid.cols);
    return {restored, features};
  }

  ForwardResult forward(Tape& t, Var image, Probe* probe = nullptr) const {
    ForwardResult r;
    std::optional<Var> lower;
    for (int level = kLevels; level >= 1; --level) {
      LevelResult lr = level_forward(t, image, lower, level, probe);
      r.levels[static_cast<std::size_t>(level - 1)] = lr.restored;
      lower = lr.features;
    }
    r.output = r.levels[0];
    return r;
  }

  /// Inference on [3,H,W] or [N,3,H,W]; output clamped to [0, 1].
  Tensor deblur(const Tensor& image) const {
    const bool single = image.rank() == 3;
    Tensor input = single ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    Tape t(false);
    Tensor out = forward(t, t.constant(std::move(input))).output.value();
    for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
    return single ? out.reshaped({out.dim(1), out.dim(2), out.dim(3)}) : out;
  }

 private:
  static CAPResult* probe_slot(Probe* probe, int level, bool decoder, std::size_t block) {
    if (!probe || probe->level != level || probe->decoder != decoder || probe->block != block) return nullptr;
    probe->result.emplace();
    return &*probe->result;
  }

  CAPConfig cap_config(bool decoder) const {
    CAPConfig c;
    c.channels = cfg_.base_channels;
    c.clusters = cfg_.clusters;
    c.self_attention = cfg_.self_attention;
    c.cross_attention = decoder && cfg_.cross_attention;
    c.pdf = cfg_.pdf_kernels;
    c.pdf_config.kernel = cfg_.pdf_kernel;
    c.pdf_config.delta_max = cfg_.delta_max;
    c.pdf_config.offsets = cfg_.dynamic_offsets ? OffsetMode::dynamic : OffsetMode::learned;
    return c;
  }

  LevelParams build_level(int level, std::mt19937_64& rng) {
    const std::size_t c = cfg_.base_channels;
    const std::string pre = "level" + std::to_string(level);
    LevelParams lp;
    lp.head = make_conv(store_, pre + ".head", 3, c, 3, rng);
    for (std::size_t b = 0; b < cfg_.resblocks; ++b) {
      lp.encoder.push_back(make_resblock(store_, pre + ".enc" + std::to_string(b), cap_config(false), rng));
    }
    for (std::size_t s = 0; s < cfg_.down_stages; ++s) {
      lp.down.push_back(make_conv(store_, pre + ".down" + std::to_string(s), c, c, 3, rng, {}, 2));
    }
    if (level < kLevels && cfg_.cross_level_attention) {
      lp.cross_level = make_attention(store_, pre + ".cla", {c, cfg_.clusters, AttentionVariant::cross}, rng);
      lp.cross_level_out = make_conv(store_, pre + ".cla_out", c, c, 1, rng, ConvInit{0.1, 0.0});
    }
    for (std::size_t b = 0; b < cfg_.resblocks; ++b) {
      lp.decoder.push_back(make_resblock(store_, pre + ".dec" + std::to_string(b), cap_config(true), rng));
    }
    for (std::size_t s = 0; s < cfg_.down_stages; ++s) {
      lp.up.push_back(make_conv(store_, pre + ".up" + std::to_string(s), c, c, 3, rng));
    }
    lp.tail = make_conv(store_, pre + ".tail", c, 3, 3, rng, ConvInit{0.01, 0.0});
    return lp;
  }

  NetworkConfig cfg_;
  ParameterStore store_;
  std::array<LevelParams, kLevels> levels_;
};

}  // namespace cadeblur
