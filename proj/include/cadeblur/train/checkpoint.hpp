#pragma once

// Binary checkpoint, little-endian throughout:
//   "CADBCKPT" | u32 version | network config | u64 iteration |
//   u64 len + RNG state text | u64 count + parameters | u64 adam step |
//   first moments | second moments
// A parameter is u64 id, u64 len + name, u64 rank, u64 dims..., f64 values.
// Moments are stored in parameter order with the parameter's shape.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cadeblur/network.hpp"
#include "cadeblur/train/adam.hpp"

namespace cadeblur {

constexpr char kCheckpointMagic[8] = {'C', 'A', 'D', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void pod(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out_.append(b, sizeof(T));
  }
  void u64(std::uint64_t v) { pod(v); }
  void text(const std::string& s) {
    u64(s.size());
    out_ += s;
  }
  void doubles(const Tensor& t) { out_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::string text() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(Tensor& t) {
    need(t.size() * sizeof(double));
    std::memcpy(t.data(), b_.data() + pos_, t.size() * sizeof(double));
    pos_ += t.size() * sizeof(double);
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (b_.size() - pos_ < n) throw ParseError("truncated checkpoint", pos_);
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline void write_config(ByteWriter& w, const NetworkConfig& c) {
  w.u64(c.base_channels);
  w.u64(c.resblocks);
  w.u64(c.down_stages);
  w.u64(c.clusters);
  w.u64(c.pdf_kernel);
  w.pod(c.delta_max);
  for (bool f : {c.self_attention, c.cross_attention, c.cross_level_attention, c.pdf_kernels, c.dynamic_offsets}) {
    w.pod(static_cast<std::uint8_t>(f));
  }
}

inline NetworkConfig read_config(ByteReader& r) {
  NetworkConfig c;
  c.base_channels = r.u64();
  c.resblocks = r.u64();
  c.down_stages = r.u64();
  c.clusters = r.u64();
  c.pdf_kernel = r.u64();
  c.delta_max = r.pod<double>();
  bool* flags[] = {&c.self_attention, &c.cross_attention, &c.cross_level_attention, &c.pdf_kernels,
                   &c.dynamic_offsets};
  for (bool* f : flags) *f = r.pod<std::uint8_t>() != 0;
  return c;
}

}  // namespace detail

/// Everything needed to continue training exactly where it stopped.
struct TrainingState {
  std::uint64_t iteration = 0;
  std::string rng_state;  // std::mt19937_64 stream text
  AdamState adam;
};

inline std::string encode_checkpoint(const Network& net, const TrainingState& state) {
  detail::ByteWriter w;
  for (char c : kCheckpointMagic) w.pod(c);
  w.pod(kCheckpointVersion);
  detail::write_config(w, net.config());
  w.u64(state.iteration);
  w.text(state.rng_state);
  const auto params = net.parameters().all();
  w.u64(params.size());
  for (const Parameter* p : params) {
    w.u64(p->id());
    w.text(p->name());
    w.u64(p->value.rank());
    for (std::size_t d : p->value.shape()) w.u64(d);
    w.doubles(p->value);
  }
  const bool moments = state.adam.m.size() == params.size();
  w.u64(state.adam.step);
  w.u64(moments ? 1 : 0);
  if (moments) {
    for (const Tensor& m : state.adam.m) w.doubles(m);
    for (const Tensor& v : state.adam.v) w.doubles(v);
  }
  return w.take();
}

/// Reads parameter values into `net`, which must have been built with the
/// stored configuration. Throws ConfigError on a mismatch.
inline TrainingState decode_checkpoint(const std::string& bytes, Network& net) {
  detail::ByteReader r(bytes);
  for (char c : kCheckpointMagic) {
    if (r.pod<char>() != c) throw ParseError("not a checkpoint file", r.offset() - 1);
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 8);
  const NetworkConfig stored = detail::read_config(r);
  if (!(stored == net.config())) throw ConfigError("checkpoint was written for a different network configuration");

  TrainingState state;
  state.iteration = r.u64();
  state.rng_state = r.text();
  auto params = net.parameters().all();
  if (r.u64() != params.size()) throw ConfigError("checkpoint parameter count does not match the network");
  for (Parameter* p : params) {
    const std::size_t at = r.offset();
    const std::uint64_t id = r.u64();
    const std::string name = r.text();
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    if (id != p->id() || name != p->name() || shape != p->value.shape()) {
      throw ConfigError("checkpoint parameter " + name + " does not match network parameter " + p->name() +
                        " (byte " + std::to_string(at) + ")");
    }
    r.doubles(p->value);
  }
  const std::uint64_t step = r.u64();
  if (r.u64() != 0) {
    state.adam.reset(params);
    for (Tensor& m : state.adam.m) r.doubles(m);
    for (Tensor& v : state.adam.v) r.doubles(v);
  }
  state.adam.step = step;
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return state;
}

inline void save_checkpoint(const std::filesystem::path& path, const Network& net, const TrainingState& state) {
  const std::string bytes = encode_checkpoint(net, state);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Network configuration stored in a checkpoint, for building a matching network.
inline NetworkConfig checkpoint_config(const std::string& bytes) {
  detail::ByteReader r(bytes);
  for (char c : kCheckpointMagic) {
    if (r.pod<char>() != c) throw ParseError("not a checkpoint file", r.offset() - 1);
  }
  if (r.pod<std::uint32_t>() != kCheckpointVersion) throw ParseError("unsupported checkpoint version", 8);
  return detail::read_config(r);
}

inline TrainingState load_checkpoint(const std::filesystem::path& path, Network& net) {
  return decode_checkpoint(read_file_bytes(path), net);
}

}  // namespace cadeblur
