#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/scene.hpp"
#include "json.hpp"

namespace bixformer {

enum class Visibility { kR, kX, kBoth };

inline const char* visibility_tag(Visibility v) {
  switch (v) {
    case Visibility::kR: return "r";
    case Visibility::kX: return "x";
    case Visibility::kBoth: return "both";
  }
  return "both";
}

inline bool visible_in(Visibility v, Modality m) {
  return v == Visibility::kBoth || (v == Visibility::kR) == (m == Modality::kRgb);
}

struct SynthConfig {
  std::size_t h = 24;
  std::size_t w = 24;
  int k = 6;
  std::size_t cf = 8;
  std::map<int, Visibility> visibility{{1, Visibility::kR}, {2, Visibility::kR}, {3, Visibility::kX},
                                       {4, Visibility::kX}, {5, Visibility::kBoth}, {6, Visibility::kBoth}};
  double noise_sigma = 0.1;
  int shapes_min = 2;
  int shapes_max = 4;
  std::uint64_t seed = 0;
  double signature_scale = 1.0;
  std::size_t side_min = 4;
  std::size_t side_max = 12;

  void validate() const {
    if (h == 0 || w == 0 || cf == 0 || k < 1) throw ConfigError("H, W, C_f and K must be positive");
    for (int c = 1; c <= k; ++c)
      if (!visibility.count(c)) throw ConfigError("visibility missing for class " + std::to_string(c));
    for (const auto& [c, v] : visibility)
      if (c < 1 || c > k) throw ConfigError("visibility given for unknown class " + std::to_string(c));
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (shapes_min < 0 || shapes_max < shapes_min || shapes_max > k)
      throw ConfigError("shapes_per_scene range must satisfy 0 <= min <= max <= K");
    if (side_min == 0 || side_max < side_min || side_max > std::min(h, w))
      throw ConfigError("rectangle side range does not fit the image");
  }
};

/// Channel carrying class c's signature.
inline std::size_t signature_channel(int c, std::size_t cf) { return static_cast<std::size_t>(c - 1) % cf; }

/// Deterministic scene `index`: non-overlapping rectangles of distinct
/// classes. Each modality sees the one-hot signature of the classes visible
/// to it inside their rectangles, plus Gaussian noise everywhere.
inline Scene generate_scene(const SynthConfig& cfg, std::uint64_t index) {
  cfg.validate();
  SplitMix64 rng(cfg.seed ^ index);

  std::vector<int> classes(static_cast<std::size_t>(cfg.k));
  for (int c = 0; c < cfg.k; ++c) classes[static_cast<std::size_t>(c)] = c + 1;
  for (std::size_t i = classes.size(); i > 1; --i)
    std::swap(classes[i - 1], classes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  const auto count = static_cast<std::size_t>(rng.uniform_int(cfg.shapes_min, cfg.shapes_max));

  struct Rect {
    std::size_t top, left, height, width;
  };
  std::vector<Rect> placed;
  for (std::size_t s = 0; s < count; ++s) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      Rect r;
      r.height = static_cast<std::size_t>(rng.uniform_int(cfg.side_min, cfg.side_max));
      r.width = static_cast<std::size_t>(rng.uniform_int(cfg.side_min, cfg.side_max));
      r.top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.h - r.height)));
      r.left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.w - r.width)));
      ok = true;
      for (const Rect& o : placed)
        if (r.top < o.top + o.height && o.top < r.top + r.height && r.left < o.left + o.width &&
            o.left < r.left + r.width)
          ok = false;
      if (ok) placed.push_back(r);
    }
    if (!ok)
      throw GenerationError("scene " + std::to_string(index) + ": could not place shape " + std::to_string(s) +
                            " without overlap after 1000 attempts");
  }

  std::vector<GroundTruthItem> items;
  Tensor feat_r({cfg.cf, cfg.h, cfg.w}, 0.0), feat_x({cfg.cf, cfg.h, cfg.w}, 0.0);
  for (std::size_t s = 0; s < count; ++s) {
    const int c = classes[s];
    const Rect& r = placed[s];
    Tensor mask({cfg.h, cfg.w}, 0.0);
    for (std::size_t y = r.top; y < r.top + r.height; ++y)
      for (std::size_t x = r.left; x < r.left + r.width; ++x) mask.at(y, x) = 1.0;
    const std::size_t ch = signature_channel(c, cfg.cf);
    const Visibility vis = cfg.visibility.at(c);
    for (std::size_t y = r.top; y < r.top + r.height; ++y)
      for (std::size_t x = r.left; x < r.left + r.width; ++x) {
        if (visible_in(vis, Modality::kRgb)) feat_r.at(ch, y, x) = cfg.signature_scale;
        if (visible_in(vis, Modality::kX)) feat_x.at(ch, y, x) = cfg.signature_scale;
      }
    items.push_back({c, std::move(mask)});
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.class_id < b.class_id; });

  if (cfg.noise_sigma > 0.0) {
    for (double& v : feat_r.data()) v += cfg.noise_sigma * rng.normal();
    for (double& v : feat_x.data()) v += cfg.noise_sigma * rng.normal();
  }
  return Scene{std::move(feat_r), std::move(feat_x), GroundTruthSet(cfg.h, cfg.w, cfg.k, std::move(items)), true,
               true};
}

struct Benchmark {
  std::vector<Scene> train;
  std::vector<Scene> test;
};

/// Train scenes use indices [0, n_train), test scenes continue from n_train.
inline Benchmark generate_benchmark(const SynthConfig& cfg, std::size_t n_train, std::size_t n_test) {
  if (n_train + n_test == 0) throw ConfigError("benchmark needs at least one scene");
  Benchmark b;
  for (std::size_t i = 0; i < n_train; ++i) b.train.push_back(generate_scene(cfg, i));
  for (std::size_t i = 0; i < n_test; ++i) b.test.push_back(generate_scene(cfg, n_train + i));
  return b;
}

inline nlohmann::ordered_json synth_config_to_json(const SynthConfig& cfg) {
  nlohmann::ordered_json o;
  o["H"] = cfg.h;
  o["W"] = cfg.w;
  o["K"] = cfg.k;
  o["C_f"] = cfg.cf;
  nlohmann::ordered_json vis;
  for (const auto& [c, v] : cfg.visibility) vis[std::to_string(c)] = visibility_tag(v);
  o["visibility"] = vis;
  o["noise_sigma"] = cfg.noise_sigma;
  o["shapes_min"] = cfg.shapes_min;
  o["shapes_max"] = cfg.shapes_max;
  o["seed"] = cfg.seed;
  return o;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

/// Writes `dir/scenes/{train,test}_NNNN.json` and `dir/manifest.json`. The
/// manifest records the generator config, each file's SHA-256 and a digest
/// over all of them. Returns the manifest.
inline nlohmann::ordered_json write_benchmark(const Benchmark& b, const SynthConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "scenes", ec);
  if (ec) throw IoError("cannot create " + (fs::path(dir) / "scenes").string() + ": " + ec.message());

  nlohmann::ordered_json manifest;
  manifest["config"] = synth_config_to_json(cfg);
  manifest["n_train"] = b.train.size();
  manifest["n_test"] = b.test.size();
  auto files = nlohmann::ordered_json::array();
  std::string all_digests;
  auto emit = [&](const std::vector<Scene>& scenes, const char* split) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "scenes/%s_%04zu.json", split, i);
      const std::string text = scene_to_json(scenes[i]).dump();
      write_text_file((fs::path(dir) / name).string(), text);
      const std::string digest = sha256_hex(text);
      all_digests += digest;
      nlohmann::ordered_json e;
      e["file"] = name;
      e["split"] = split;
      e["sha256"] = digest;
      files.push_back(std::move(e));
    }
  };
  emit(b.train, "train");
  emit(b.test, "test");
  manifest["scenes"] = std::move(files);
  manifest["digest"] = sha256_hex(all_digests);
  write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

/// Loads a benchmark written by write_benchmark, verifying file digests.
inline Benchmark load_benchmark(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto manifest = read_json_file((fs::path(dir) / "manifest.json").string());
  if (!manifest.contains("scenes") || !manifest["scenes"].is_array()) throw ParseError("manifest lacks 'scenes'");
  Benchmark b;
  for (const auto& e : manifest["scenes"]) {
    const auto file = detail::field<std::string>(e, "file");
    const auto path = (fs::path(dir) / file).string();
    const std::string text = read_text_file(path);
    if (sha256_hex(text) != detail::field<std::string>(e, "sha256"))
      throw ParseError(path + ": content digest does not match the manifest");
    Scene s = [&] {
      try {
        return scene_from_json(parse_json_text(text, path));
      } catch (const ParseError& err) {
        throw ParseError(path + ": " + err.what());
      }
    }();
    (detail::field<std::string>(e, "split") == "test" ? b.test : b.train).push_back(std::move(s));
  }
  return b;
}

}  // namespace bixformer
