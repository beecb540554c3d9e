#pragma once

// Binary PGM/PPM (P5/P6) at 8 or 16 bits per sample. Images are [C,H,W]
// tensors with C = 1 or 3 and values code / maxval.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "cadeblur/core/errors.hpp"
#include "cadeblur/core/tensor.hpp"

namespace cadeblur {

struct Image {
  Tensor pixels;  // [C,H,W] in [0, 1]
  int bit_depth = 8;
};

namespace detail {

class PnmReader {
 public:
  explicit PnmReader(const std::string& bytes) : b_(bytes) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1u << 24) throw ParseError(std::string(what) + " out of range", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw ParseError(std::string("expected ") + what + (pos_ >= b_.size() ? ", got end of file" : ""), pos_);
    }
    return v;
  }

  void single_whitespace() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw ParseError("expected whitespace before raster", pos_);
    }
    ++pos_;
  }

  unsigned byte() {
    if (pos_ >= b_.size()) throw ParseError("truncated raster", pos_);
    return static_cast<unsigned char>(b_[pos_++]);
  }

  const std::string& bytes() const { return b_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses an in-memory P5/P6 file. Malformed input raises ParseError with the byte offset.
inline Image decode_pnm(const std::string& bytes) {
  detail::PnmReader r(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("not a binary PGM/PPM file (expected P5 or P6)", 0);
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  for (int i = 0; i < 2; ++i) r.byte();
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t header_max = r.offset();
  const std::size_t maxval = r.number("maxval");
  if (width == 0 || height == 0) throw ParseError("zero image dimension", header_max);
  if (maxval == 0 || maxval > 65535) throw ParseError("maxval must be in 1..65535", header_max);
  r.single_whitespace();
  const bool wide = maxval > 255;
  const std::size_t need = width * height * channels * (wide ? 2 : 1);
  if (bytes.size() - r.offset() < need) {
    throw ParseError("truncated raster: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - r.offset()),
                     bytes.size());
  }

  Image img;
  img.bit_depth = wide ? 16 : 8;
  img.pixels = Tensor({channels, height, width});
  const auto scale = static_cast<double>(maxval);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t at = r.offset();
        unsigned code = r.byte();
        if (wide) code = (code << 8) | r.byte();
        if (code > maxval) throw ParseError("sample exceeds maxval", at);
        img.pixels[(c * height + y) * width + x] = static_cast<double>(code) / scale;
      }
  return img;
}

inline std::string encode_pnm(const Tensor& pixels, int bit_depth = 8) {
  if (pixels.rank() != 3 || (pixels.dim(0) != 1 && pixels.dim(0) != 3)) {
    throw DimensionError("images must be [1,H,W] or [3,H,W], got " + shape_string(pixels.shape()));
  }
  if (bit_depth != 8 && bit_depth != 16) throw ConfigError("bit depth must be 8 or 16");
  const std::size_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  const unsigned maxval = bit_depth == 8 ? 255u : 65535u;
  std::string out = std::string(c == 3 ? "P6" : "P5") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
                    std::to_string(maxval) + "\n";
  out.reserve(out.size() + c * h * w * (bit_depth / 8));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(pixels[(ch * h + y) * w + x], 0.0, 1.0);
        const auto code = static_cast<unsigned>(std::lround(v * maxval));
        if (bit_depth == 16) out.push_back(static_cast<char>(code >> 8));
        out.push_back(static_cast<char>(code & 0xff));
      }
  return out;
}

inline Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes);
}

inline void write_image(const std::filesystem::path& path, const Tensor& pixels, int bit_depth = 8) {
  const std::string bytes = encode_pnm(pixels, bit_depth);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace cadeblur
