#pragma once

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/tensor.hpp"
#include "json.hpp"

namespace bixformer {

/// One multimodal sample. An absent modality has all-zero features.
struct Scene {
  Tensor feat_r;  // C_f x H x W
  Tensor feat_x;  // C_f x H x W
  GroundTruthSet gt;
  bool r_present = true;
  bool x_present = true;

  std::size_t channels() const { return feat_r.dim(0); }

  /// Copy with absent modalities replaced by zeros.
  Scene with_presence(bool r, bool x) const {
    Scene s = *this;
    s.r_present = r;
    s.x_present = x;
    if (!r) s.feat_r = Tensor(feat_r.shape(), 0.0);
    if (!x) s.feat_x = Tensor(feat_x.shape(), 0.0);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Run-length encoding of binary masks: alternating run lengths of 0s and 1s
// over row-major pixels, starting with 0s (the first run may be empty).

inline std::vector<std::size_t> rle_encode(std::span<const double> bits) {
  std::vector<std::size_t> runs;
  double current = 0.0;
  std::size_t count = 0;
  for (double b : bits) {
    if (b == current) {
      ++count;
    } else {
      runs.push_back(count);
      current = b;
      count = 1;
    }
  }
  runs.push_back(count);
  return runs;
}

inline Tensor rle_decode(const nlohmann::json& runs, std::size_t h, std::size_t w) {
  if (!runs.is_array()) throw ParseError("mask_rle must be an array");
  Tensor mask({h, w}, 0.0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    if (!r.is_number_integer() || r.get<long long>() < 0)
      throw ParseError("mask_rle offset " + std::to_string(i) + ": run length must be a non-negative integer");
    const auto n = r.get<std::size_t>();
    if (n > h * w - pos)
      throw ParseError("mask_rle offset " + std::to_string(i) + ": runs exceed " + std::to_string(h * w) + " pixels");
    if (i % 2 == 1)
      for (std::size_t k = 0; k < n; ++k) mask[pos + k] = 1.0;
    pos += n;
  }
  if (pos != h * w)
    throw ParseError("mask_rle offset " + std::to_string(runs.size()) + ": runs cover " + std::to_string(pos) +
                     " of " + std::to_string(h * w) + " pixels");
  return mask;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json gt_items_to_json(const GroundTruthSet& gt) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& item : gt.items()) {
    nlohmann::ordered_json o;
    o["class"] = item.class_id;
    o["mask_rle"] = rle_encode(item.mask.data());
    arr.push_back(std::move(o));
  }
  return arr;
}

namespace detail {

template <class T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Reads {"h", "w", "k", "gt": [{"class", "mask_rle"}]}; other keys ignored.
inline GroundTruthSet gt_from_json(const nlohmann::json& j) {
  const auto h = detail::field<std::size_t>(j, "h");
  const auto w = detail::field<std::size_t>(j, "w");
  const auto k = detail::field<int>(j, "k");
  if (!j.contains("gt") || !j["gt"].is_array()) throw ParseError("missing array 'gt'");
  std::vector<GroundTruthItem> items;
  for (const auto& e : j["gt"]) {
    if (!e.contains("mask_rle")) throw ParseError("gt entry without 'mask_rle'");
    items.push_back({detail::field<int>(e, "class"), rle_decode(e["mask_rle"], h, w)});
  }
  try {
    return GroundTruthSet(h, w, k, std::move(items));
  } catch (const ContractError& e) {
    throw ParseError(e.what());
  } catch (const DimensionError& e) {
    throw ParseError(e.what());
  }
}

inline nlohmann::ordered_json scene_to_json(const Scene& s) {
  nlohmann::ordered_json o;
  o["h"] = s.gt.height();
  o["w"] = s.gt.width();
  o["k"] = s.gt.num_classes();
  o["cf"] = s.channels();
  o["feat_r"] = s.feat_r.values();
  o["feat_x"] = s.feat_x.values();
  o["gt"] = gt_items_to_json(s.gt);
  o["present"] = {{"r", s.r_present}, {"x", s.x_present}};
  return o;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  GroundTruthSet gt = gt_from_json(j);
  const auto cf = detail::field<std::size_t>(j, "cf");
  const Shape shape{cf, gt.height(), gt.width()};
  auto features = [&](const char* key) {
    auto data = detail::field<std::vector<double>>(j, key);
    if (data.size() != shape_numel(shape))
      throw ParseError(std::string("'") + key + "' has " + std::to_string(data.size()) + " values, expected " +
                       std::to_string(shape_numel(shape)));
    return Tensor(shape, std::move(data));
  };
  Scene s{features("feat_r"), features("feat_x"), std::move(gt), true, true};
  if (!j.contains("present")) throw ParseError("missing field 'present'");
  s.r_present = detail::field<bool>(j["present"], "r");
  s.x_present = detail::field<bool>(j["present"], "x");
  return s;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path);
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << text;
  if (!out) throw IoError("cannot write " + path);
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) { return parse_json_text(read_text_file(path), path); }

inline Scene load_scene(const std::string& path) {
  try {
    return scene_from_json(read_json_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace bixformer
