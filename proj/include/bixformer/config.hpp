#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/eval.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/synth.hpp"
#include "bixformer/train.hpp"
#include "json.hpp"

namespace bixformer {

/// Flat run configuration shared by every CLI verb.
struct RunConfig {
  TrainConfig train;
  SynthConfig synth;
  std::size_t n_train = 64;
  std::size_t n_test = 32;
  /// Seed of the scene generator; follows `train.seed` unless set.
  std::optional<std::uint64_t> data_seed;

  SynthConfig synth_config() const {
    SynthConfig s = synth;
    s.seed = data_seed.value_or(train.seed);
    return s;
  }

  void validate() const {
    const auto nonneg = [](double v, const char* name) {
      if (!(v >= 0.0)) throw ConfigError(std::string("'") + name + "' must be >= 0");
    };
    nonneg(train.cost.cls, "w_cls");
    nonneg(train.cost.dice, "w_dice");
    nonneg(train.cost.bce, "w_bce");
    nonneg(train.loss.none_weight, "none_weight");
    nonneg(train.align.mse, "lambda_mse");
    nonneg(train.align.mmd, "lambda_mmd");
    nonneg(train.align.kl, "beta_kl");
    nonneg(train.lr, "lr");
    if (train.steps < 1) throw ConfigError("'steps' must be >= 1");
    if (train.batch_size < 1) throw ConfigError("'batch_size' must be >= 1");
    if (train.dims.queries < 1 || train.dims.width < 1) throw ConfigError("'L' and 'C' must be >= 1");
    if (train.dims.channels != synth.cf || train.dims.classes != synth.k)
      throw ConfigError("model and generator disagree on C_f or K");
    for (const auto& s : train.subsets) parse_subset(s);
    synth.validate();
  }
};

namespace detail {

template <class T>
T config_value(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("field '" + key + "': wrong type (" + j.at(key).dump() + ")");
  }
}

inline Visibility parse_visibility(const std::string& tag, const std::string& cls) {
  if (tag == "r") return Visibility::kR;
  if (tag == "x") return Visibility::kX;
  if (tag == "both") return Visibility::kBoth;
  throw ConfigError("field 'visibility': class " + cls + " has unknown visibility '" + tag + "'");
}

}  // namespace detail

/// Parses a flat JSON object; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{
      "seed",       "data_seed",  "L",          "C",       "C_f",      "H",          "W",          "K",
      "w_cls",      "w_dice",     "w_bce",      "none_weight", "lambda_mse", "lambda_mmd", "beta_kl", "lr",
      "steps",      "batch_size", "mode",       "subsets", "noise_sigma", "visibility", "shapes_min", "shapes_max",
      "n_train",    "n_test",     "eval_every"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  RunConfig c;
  using detail::config_value;
  const auto has = [&](const char* k) { return j.contains(k); };
  if (has("seed")) c.train.seed = config_value<std::uint64_t>(j, "seed");
  if (has("data_seed")) c.data_seed = config_value<std::uint64_t>(j, "data_seed");
  if (has("L")) c.train.dims.queries = config_value<std::size_t>(j, "L");
  if (has("C")) c.train.dims.width = config_value<std::size_t>(j, "C");
  if (has("C_f")) c.synth.cf = config_value<std::size_t>(j, "C_f");
  if (has("H")) c.synth.h = config_value<std::size_t>(j, "H");
  if (has("W")) c.synth.w = config_value<std::size_t>(j, "W");
  if (has("K")) {
    c.synth.k = config_value<int>(j, "K");
    if (!has("visibility")) {
      // Default visibility only covers K = 6; any other K must spell it out.
      if (c.synth.k != 6) c.synth.visibility.clear();
    }
  }
  c.train.dims.channels = c.synth.cf;
  c.train.dims.classes = c.synth.k;
  if (has("w_cls")) c.train.cost.cls = c.train.loss.cls = config_value<double>(j, "w_cls");
  if (has("w_dice")) c.train.cost.dice = c.train.loss.dice = config_value<double>(j, "w_dice");
  if (has("w_bce")) c.train.cost.bce = c.train.loss.bce = config_value<double>(j, "w_bce");
  if (has("none_weight")) c.train.loss.none_weight = config_value<double>(j, "none_weight");
  if (has("lambda_mse")) c.train.align.mse = config_value<double>(j, "lambda_mse");
  if (has("lambda_mmd")) c.train.align.mmd = config_value<double>(j, "lambda_mmd");
  if (has("beta_kl")) c.train.align.kl = config_value<double>(j, "beta_kl");
  if (has("lr")) c.train.lr = config_value<double>(j, "lr");
  if (has("steps")) c.train.steps = config_value<std::size_t>(j, "steps");
  if (has("batch_size")) c.train.batch_size = config_value<std::size_t>(j, "batch_size");
  if (has("eval_every")) c.train.eval_every = config_value<std::size_t>(j, "eval_every");
  if (has("mode")) c.train.mode = parse_train_mode(config_value<std::string>(j, "mode"));
  if (has("subsets")) c.train.subsets = config_value<std::vector<std::string>>(j, "subsets");
  if (has("noise_sigma")) c.synth.noise_sigma = config_value<double>(j, "noise_sigma");
  if (has("shapes_min")) c.synth.shapes_min = config_value<int>(j, "shapes_min");
  if (has("shapes_max")) c.synth.shapes_max = config_value<int>(j, "shapes_max");
  if (has("n_train")) c.n_train = config_value<std::size_t>(j, "n_train");
  if (has("n_test")) c.n_test = config_value<std::size_t>(j, "n_test");
  if (has("visibility")) {
    const auto& v = j.at("visibility");
    if (!v.is_object()) throw ConfigError("field 'visibility' must map class ids to r, x or both");
    c.synth.visibility.clear();
    for (const auto& [cls, tag] : v.items()) {
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(cls, &used);
        if (used != cls.size()) throw std::invalid_argument(cls);
      } catch (const std::exception&) {
        throw ConfigError("field 'visibility': '" + cls + "' is not a class id");
      }
      if (!tag.is_string()) throw ConfigError("field 'visibility': class " + cls + " must be r, x or both");
      c.synth.visibility[id] = detail::parse_visibility(tag.get<std::string>(), cls);
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json o;
  o["seed"] = c.train.seed;
  if (c.data_seed) o["data_seed"] = *c.data_seed;
  o["L"] = c.train.dims.queries;
  o["C"] = c.train.dims.width;
  o["C_f"] = c.synth.cf;
  o["H"] = c.synth.h;
  o["W"] = c.synth.w;
  o["K"] = c.synth.k;
  o["w_cls"] = c.train.cost.cls;
  o["w_dice"] = c.train.cost.dice;
  o["w_bce"] = c.train.cost.bce;
  o["none_weight"] = c.train.loss.none_weight;
  o["lambda_mse"] = c.train.align.mse;
  o["lambda_mmd"] = c.train.align.mmd;
  o["beta_kl"] = c.train.align.kl;
  o["lr"] = c.train.lr;
  o["steps"] = c.train.steps;
  o["batch_size"] = c.train.batch_size;
  o["eval_every"] = c.train.eval_every;
  o["mode"] = train_mode_tag(c.train.mode);
  o["subsets"] = c.train.subsets;
  o["noise_sigma"] = c.synth.noise_sigma;
  nlohmann::ordered_json vis;
  for (const auto& [cls, v] : c.synth.visibility) vis[std::to_string(cls)] = visibility_tag(v);
  o["visibility"] = vis;
  o["shapes_min"] = c.synth.shapes_min;
  o["shapes_max"] = c.synth.shapes_max;
  o["n_train"] = c.n_train;
  o["n_test"] = c.n_test;
  return o;
}

}  // namespace bixformer
