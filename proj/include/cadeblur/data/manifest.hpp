#pragma once

// Dataset manifest: one JSON object per line describing a sharp/blurred pair.
// Image paths are relative to the manifest's directory.
//   {"index":0,"sharp":"sharp_00000.ppm","blurred":"blurred_00000.ppm",
//    "kind":"linear","length":11,"angle":45.0,"noise_sigma":0.0,"seed":123}

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadeblur/data/image_io.hpp"
#include "cadeblur/data/synth.hpp"

namespace cadeblur {

struct ManifestRecord {
  std::size_t index = 0;
  std::string sharp;
  std::string blurred;
  BlurSpec spec;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["index"] = r.index;
  j["sharp"] = r.sharp;
  j["blurred"] = r.blurred;
  j["kind"] = "linear";
  j["length"] = r.spec.length;
  j["angle"] = r.spec.angle;
  j["noise_sigma"] = r.noise_sigma;
  j["seed"] = r.seed;
  return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.index = j.at("index").get<std::size_t>();
  r.sharp = j.at("sharp").get<std::string>();
  r.blurred = j.at("blurred").get<std::string>();
  if (j.at("kind").get<std::string>() != "linear") throw ConfigError("unsupported blur kind in manifest");
  r.spec.length = j.at("length").get<std::size_t>();
  r.spec.angle = j.at("angle").get<double>();
  r.noise_sigma = j.value("noise_sigma", 0.0);
  r.seed = j.at("seed").get<std::uint64_t>();
  r.spec.validate();
  return r;
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t start = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": bad manifest record: " + e.what(), start);
    }
  }
  return records;
}

/// Writes every pair as <dir>/sharp_NNNNN.p?m and blurred_NNNNN.p?m plus <dir>/manifest.jsonl.
inline void write_dataset(const std::filesystem::path& dir, const SynthOptions& opt, int bit_depth = 8) {
  opt.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
  const std::filesystem::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + manifest.string());

  std::vector<ManifestRecord> records(opt.count);
  parallel_for(opt.count, [&](std::size_t i) {
    const ImagePair pair = make_pair(opt, i);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu.ppm", i);
    ManifestRecord& r = records[i];
    r.index = i;
    r.sharp = std::string("sharp_") + buf;
    r.blurred = std::string("blurred_") + buf;
    r.spec = pair.spec;
    r.noise_sigma = opt.noise_sigma;
    r.seed = pair.seed;
    write_image(dir / r.sharp, pair.sharp, bit_depth);
    write_image(dir / r.blurred, pair.blurred, bit_depth);
  });
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error("write failed for " + manifest.string());
}

inline std::vector<ImagePair> load_dataset(const std::filesystem::path& manifest) {
  const auto records = read_manifest(manifest);
  const std::filesystem::path dir = manifest.parent_path();
  std::vector<ImagePair> pairs(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const ManifestRecord& r = records[i];
    pairs[i].sharp = read_image(dir / r.sharp).pixels;
    pairs[i].blurred = read_image(dir / r.blurred).pixels;
    if (pairs[i].sharp.shape() != pairs[i].blurred.shape() || pairs[i].sharp.dim(0) != 3) {
      throw DimensionError("pair " + std::to_string(r.index) + " must be two RGB images of equal size");
    }
    pairs[i].spec = r.spec;
    pairs[i].seed = r.seed;
  });
  return pairs;
}

}  // namespace cadeblur
