#pragma once

// Content-aware processing: a global attention branch and a pixel-dependent
// filtering branch run in parallel and are blended by a per-pixel mask
//   y = M_fus * y_att + (1 - M_fus) * y_dyn,   M_fus = sigmoid(f_fus(x)).
// Decoder blocks add cross-attention over an encoder feature to the
// attention branch (summed with self-attention).

#include <cstddef>
#include <optional>
#include <random>
#include <string>

#include "cadeblur/attention.hpp"
#include "cadeblur/pdf.hpp"

namespace cadeblur {

struct CAPConfig {
  std::size_t channels = 32;
  std::size_t clusters = 8;
  bool self_attention = true;
  bool cross_attention = false;  // decoder variant
  bool pdf = true;
  PDFConfig pdf_config{};
};

struct CAPParams {
  CAPConfig config;
  std::optional<AttentionParams> self_attn;
  std::optional<AttentionParams> cross_attn;
  std::optional<PDFParams> pdf;
  std::optional<ConvLayer> fusion;  // 1x1, C -> 1; present when both branches are

  bool decoder() const { return cross_attn.has_value(); }
  bool has_attention() const { return self_attn || cross_attn; }
};

inline CAPParams make_cap(ParameterStore& store, const std::string& prefix, CAPConfig cfg, std::mt19937_64& rng) {
  CAPParams p;
  p.config = cfg;
  const AttentionConfig att{cfg.channels, cfg.clusters, AttentionVariant::self};
  if (cfg.self_attention) p.self_attn = make_attention(store, prefix + ".sa", att, rng);
  if (cfg.cross_attention) {
    p.cross_attn = make_attention(store, prefix + ".ca", {cfg.channels, cfg.clusters, AttentionVariant::cross}, rng);
  }
  if (cfg.pdf) {
    PDFConfig pc = cfg.pdf_config;
    pc.channels = cfg.channels;
    p.pdf = make_pdf(store, prefix + ".pdf", pc, rng);
  }
  if (p.has_attention() && p.pdf) p.fusion = make_conv(store, prefix + ".fus", cfg.channels, 1, 1, rng, ConvInit{0.1, 0.0});
  return p;
}

/// Per-pixel convex blend, mask broadcast over channels.
inline Var fuse(Var y_att, Var y_dyn, Var mask) {
  if (y_att.shape() != y_dyn.shape()) {
    throw DimensionError("fuse: branch shapes differ " + shape_string(y_att.shape()) + " vs " +
                         shape_string(y_dyn.shape()));
  }
  const Shape& s = y_att.shape();
  const Shape& m = mask.shape();
  if (m.size() != 4 || m[0] != s[0] || m[1] != 1 || m[2] != s[2] || m[3] != s[3]) {
    throw DimensionError("fuse: mask must be [N,1,H,W] matching the branches, got " + shape_string(m));
  }
  return ops::add(ops::mul(mask, y_att), ops::mul(ops::one_minus(mask), y_dyn));
}

struct CAPResult {
  Var output;
  std::optional<AttentionResult> self_attn;
  std::optional<AttentionResult> cross_attn;
  std::optional<PDFResult> pdf;
  std::optional<Var> fusion_mask;
  std::optional<Var> y_att;
  std::optional<Var> y_dyn;
};

inline CAPResult cap_forward(Tape& t, const CAPParams& p, Var x, std::optional<Var> cross_source = std::nullopt) {
  if (p.decoder() && !cross_source) throw ConfigError("decoder content-aware block requires a cross-attention source");
  if (!p.decoder() && cross_source) throw ConfigError("encoder content-aware block takes no cross-attention source");
  CAPResult r;
  if (p.self_attn) {
    r.self_attn = efficient_attention(t, *p.self_attn, x);
    r.y_att = r.self_attn->output;
  }
  if (p.cross_attn) {
    r.cross_attn = cross_attention(t, *p.cross_attn, *cross_source, x);
    r.y_att = r.y_att ? ops::add(*r.y_att, r.cross_attn->output) : r.cross_attn->output;
  }
  if (p.pdf) {
    r.pdf = pdf_forward(t, *p.pdf, x);
    r.y_dyn = r.pdf->output;
  }
  if (r.y_att && r.y_dyn) {
    r.fusion_mask = ops::sigmoid((*p.fusion)(t, x));
    r.output = fuse(*r.y_att, *r.y_dyn, *r.fusion_mask);
  } else if (r.y_att) {
    r.output = *r.y_att;
  } else if (r.y_dyn) {
    r.output = *r.y_dyn;
  } else {
    r.output = x;
  }
  return r;
}

// ---------------------------------------------------------------------------

struct ResBlockParams {
  ConvLayer conv_in;
  CAPParams cap;
  ConvLayer conv_out;
};

inline ResBlockParams make_resblock(ParameterStore& store, const std::string& prefix, CAPConfig cfg,
                                    std::mt19937_64& rng) {
  ResBlockParams p;
  p.conv_in = make_conv(store, prefix + ".conv_in", cfg.channels, cfg.channels, 3, rng);
  p.cap = make_cap(store, prefix + ".cap", cfg, rng);
  p.conv_out = make_conv(store, prefix + ".conv_out", cfg.channels, cfg.channels, 3, rng, ConvInit{0.1, 0.0});
  return p;
}

/// x + conv_out(relu(cap(relu(conv_in(x))))).
inline Var resblock_forward(Tape& t, const ResBlockParams& p, Var x, std::optional<Var> cross_source = std::nullopt,
                            CAPResult* probe = nullptr) {
  Var h = ops::relu(p.conv_in(t, x));
  CAPResult c = cap_forward(t, p.cap, h, cross_source);
  Var out = ops::add(x, p.conv_out(t, ops::relu(c.output)));
  if (probe) *probe = std::move(c);
  return out;
}

}  // namespace cadeblur
