#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/cma.hpp"
#include "bixformer/error.hpp"
#include "bixformer/eval.hpp"
#include "bixformer/model.hpp"
#include "bixformer/params.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/umm.hpp"
#include "json.hpp"

namespace bixformer {

enum class TrainMode { kUmmCma, kUmm, kMamOnly, kCmOnly };

inline const char* train_mode_tag(TrainMode m) {
  switch (m) {
    case TrainMode::kUmmCma: return "umm_cma";
    case TrainMode::kUmm: return "umm";
    case TrainMode::kMamOnly: return "mam_only";
    case TrainMode::kCmOnly: return "cm_only";
  }
  return "umm_cma";
}

inline TrainMode parse_train_mode(const std::string& tag) {
  for (TrainMode m : {TrainMode::kUmmCma, TrainMode::kUmm, TrainMode::kMamOnly, TrainMode::kCmOnly})
    if (tag == train_mode_tag(m)) return m;
  throw ConfigError("unknown mode '" + tag + "' (expected umm_cma, umm, mam_only or cm_only)");
}

inline MatchingMode matching_mode(TrainMode m) {
  switch (m) {
    case TrainMode::kMamOnly: return MatchingMode::kMamOnly;
    case TrainMode::kCmOnly: return MatchingMode::kCmOnly;
    default: return MatchingMode::kUmm;
  }
}

struct TrainConfig {
  ModelDims dims;
  CostWeights cost;
  LossWeights loss;
  AlignmentWeights align;
  double lr = 1e-2;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kUmmCma;
  std::vector<std::string> subsets{"r", "x", "rx"};
  /// Epochs between mIoU evaluations in the metrics log; 0 logs loss only.
  std::size_t eval_every = 1;
};

/// Adam with bias correction, no weight decay.
class Adam {
 public:
  explicit Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor* p : params_) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }

  void step(const std::vector<const Tensor*>& grads) {
    if (grads.size() != params_.size()) throw ContractError("one gradient per parameter required");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      const Tensor& g = *grads[i];
      if (g.shape() != p.shape()) throw DimensionError("gradient " + shape_str(g.shape()) + " for " + shape_str(p.shape()));
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        p[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Everything a training run updates.
struct TrainState {
  ModelParams model;
  RefinerParams refiner_rx;  // refines RGB queries towards X
  RefinerParams refiner_xr;
};

inline TrainState init_state(const ModelDims& dims, std::uint64_t seed) {
  SplitMix64 rng(seed);
  TrainState s;
  s.model = init_model(dims, rng);
  s.refiner_rx = init_refiner(dims.width, rng);
  s.refiner_xr = init_refiner(dims.width, rng);
  return s;
}

inline nlohmann::ordered_json state_to_json(const TrainState& s) {
  nlohmann::ordered_json o;
  params_to_json(s.model, "", o);
  params_to_json(s.refiner_rx, "refiner_rx.", o);
  params_to_json(s.refiner_xr, "refiner_xr.", o);
  return o;
}

/// Loads a checkpoint; `dims` fixes the expected shapes.
inline TrainState state_from_json(const nlohmann::json& j, const ModelDims& dims) {
  if (!j.is_object()) throw ParseError("checkpoint must be a JSON object");
  TrainState s = init_state(dims, 0);
  params_from_json(s.model, "", j);
  params_from_json(s.refiner_rx, "refiner_rx.", j);
  params_from_json(s.refiner_xr, "refiner_xr.", j);
  return s;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed
  double loss = 0.0;     // mean per-scene loss over the epoch's steps
  std::optional<SubsetEvaluation> eval;
};

inline nlohmann::ordered_json epoch_to_json(const EpochMetrics& m) {
  nlohmann::ordered_json o;
  o["epoch"] = m.epoch;
  o["step"] = m.step;
  o["loss"] = m.loss;
  if (m.eval) {
    nlohmann::ordered_json subsets;
    for (const auto& r : m.eval->reports) subsets[r.subset] = r.mean_iou;
    o["miou"] = subsets;
    o["mean_miou"] = m.eval->mean.mean_iou;
  }
  return o;
}

struct TrainResult {
  TrainState state;
  std::vector<EpochMetrics> log;
  std::size_t cm_invocations = 0;
  std::size_t alignment_pairs = 0;  // summed over all scene passes
};

struct SceneLoss {
  double loss = 0.0;
  bool cm_invoked = false;
  std::size_t pairs = 0;
};

struct SceneGraph {
  ModelVars model;
  RefinerVars refiner_rx, refiner_xr;
  Var loss;
  SceneLoss info;
};

/// Builds L_seg (+ L_a in umm_cma mode) for one scene on `tape`. The noise
/// tensors are used only by the refiners.
inline SceneGraph scene_loss(Tape& tape, const TrainState& state, const Scene& scene, TrainMode mode,
                             const TrainConfig& cfg, const Tensor& noise_r, const Tensor& noise_x) {
  SceneGraph g;
  g.model = bind(tape, state.model);
  const ForwardOutput out = forward(tape, g.model, scene);
  const std::size_t h = scene.gt.height(), w = scene.gt.width();
  const PredictionSet pr = to_prediction(out.r, Modality::kRgb, h, w);
  const PredictionSet px = to_prediction(out.x, Modality::kX, h, w);
  const UmmResult u = umm_full(pr, px, scene.gt, cfg.cost, matching_mode(mode));
  if (mode == TrainMode::kMamOnly && u.diagnostics.cm_invoked) throw ContractError("CM ran in mam_only mode");
  g.info.cm_invoked = u.diagnostics.cm_invoked;
  g.loss = seg_loss(tape, out.r.logits, out.x.logits, scene.gt, u.final_matching, cfg.loss);
  if (mode == TrainMode::kUmmCma) {
    g.refiner_rx = bind(tape, state.refiner_rx);
    g.refiner_xr = bind(tape, state.refiner_xr);
    const auto classes_r = assigned_classes(u.final_matching, scene.gt, Modality::kRgb);
    const auto classes_x = assigned_classes(u.final_matching, scene.gt, Modality::kX);
    const AlignmentResult a = alignment_loss(tape, out.r.queries, out.x.queries, classes_r, classes_x, g.refiner_rx,
                                             g.refiner_xr, noise_r, noise_x, cfg.align);
    g.info.pairs = a.pairs;
    g.loss = add(g.loss, a.loss);
  }
  g.info.loss = g.loss.value().item();
  return g;
}

namespace detail {

inline void add_into(std::vector<Tensor>& acc, const std::vector<Tensor>& g, double s) {
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += s * g[i][j];
}

template <class P>
std::vector<Tensor> zeros_like(const P& p) {
  std::vector<Tensor> out;
  p.visit([&](const std::string&, const Tensor& t) { out.emplace_back(t.shape(), 0.0); });
  return out;
}

template <template <class> class P>
std::vector<Tensor> grads_of(const Tape& tape, const P<Var>& vars) {
  std::vector<Tensor> out;
  vars.visit([&](const std::string&, const Var& v) { out.push_back(tape.grad(v)); });
  return out;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Adam on L_seg (+ L_a) with batches accumulated sequentially over scenes.
/// Scenes are visited in a per-epoch shuffled order. Refiner noise is drawn
/// once per step and shared by the scenes of its batch; the shuffle and the
/// noise come from streams derived from the seed, so runs are reproducible
/// bit for bit.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Scene>& scenes, const EpochCallback& on_epoch = {}) {
  if (scenes.empty()) throw ContractError("training needs at least one scene");
  if (cfg.steps == 0 || cfg.batch_size == 0) throw ConfigError("steps and batch_size must be >= 1");
  for (const Scene& s : scenes)
    if (s.gt.size() > cfg.dims.queries)
      throw InfeasibleError(std::to_string(cfg.dims.queries) + " queries per modality for a scene with " +
                            std::to_string(s.gt.size()) + " labels");

  TrainResult result;
  result.state = init_state(cfg.dims, cfg.seed);
  TrainState& st = result.state;
  Adam opt_model(flatten(st.model), cfg.lr);
  std::vector<Tensor*> refiner_params = flatten(st.refiner_rx);
  for (Tensor* t : flatten(st.refiner_xr)) refiner_params.push_back(t);
  Adam opt_refiner(refiner_params, cfg.lr);

  SplitMix64 order_rng(cfg.seed ^ 0x5eed0f0dULL);
  SplitMix64 noise_rng(cfg.seed ^ 0x0a15e0f5ULL);
  std::vector<std::size_t> order(scenes.size());
  std::size_t cursor = order.size();
  std::size_t epoch = 0;
  const std::size_t steps_per_epoch = (scenes.size() + cfg.batch_size - 1) / cfg.batch_size;
  double epoch_loss = 0.0;
  std::size_t epoch_passes = 0;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto acc_model = detail::zeros_like(st.model);
    std::vector<Tensor> acc_rx, acc_xr;
    if (cfg.mode == TrainMode::kUmmCma) {
      acc_rx = detail::zeros_like(st.refiner_rx);
      acc_xr = detail::zeros_like(st.refiner_xr);
    }
    const Tensor noise_r = gaussian_tensor({cfg.dims.queries, cfg.dims.width}, 1.0, noise_rng);
    const Tensor noise_x = gaussian_tensor({cfg.dims.queries, cfg.dims.width}, 1.0, noise_rng);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        cursor = 0;
      }
      const std::size_t index = order[cursor++];

      Tape tape;
      SceneGraph g = scene_loss(tape, st, scenes[index], cfg.mode, cfg, noise_r, noise_x);
      if (!std::isfinite(g.info.loss)) {
        nlohmann::ordered_json dump;
        dump["step"] = step;
        dump["scene"] = index;
        dump["mode"] = train_mode_tag(cfg.mode);
        dump["loss"] = std::to_string(g.info.loss);
        dump["params"] = state_to_json(st);
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " on scene " +
                                  std::to_string(index),
                              dump.dump());
      }
      tape.backward(g.loss);
      detail::add_into(acc_model, detail::grads_of(tape, g.model), inv_batch);
      if (cfg.mode == TrainMode::kUmmCma) {
        detail::add_into(acc_rx, detail::grads_of(tape, g.refiner_rx), inv_batch);
        detail::add_into(acc_xr, detail::grads_of(tape, g.refiner_xr), inv_batch);
      }
      result.cm_invocations += g.info.cm_invoked ? 1 : 0;
      result.alignment_pairs += g.info.pairs;
      epoch_loss += g.info.loss;
      ++epoch_passes;
    }

    std::vector<const Tensor*> gm;
    for (const Tensor& t : acc_model) gm.push_back(&t);
    opt_model.step(gm);
    if (cfg.mode == TrainMode::kUmmCma) {
      std::vector<const Tensor*> gr;
      for (const Tensor& t : acc_rx) gr.push_back(&t);
      for (const Tensor& t : acc_xr) gr.push_back(&t);
      opt_refiner.step(gr);
    }

    const bool last = step + 1 == cfg.steps;
    if ((step + 1) % steps_per_epoch == 0 || last) {
      EpochMetrics m;
      m.epoch = epoch;
      m.step = step + 1;
      m.loss = epoch_loss / static_cast<double>(epoch_passes);
      if (cfg.eval_every != 0 && ((epoch + 1) % cfg.eval_every == 0 || last))
        m.eval = subset_eval(st.model, scenes, cfg.subsets);
      if (on_epoch) on_epoch(m);
      result.log.push_back(std::move(m));
      ++epoch;
      epoch_loss = 0.0;
      epoch_passes = 0;
    }
  }
  return result;
}

/// Metrics log as JSON lines.
inline std::string metrics_jsonl(const std::vector<EpochMetrics>& log) {
  std::string out;
  for (const auto& m : log) out += epoch_to_json(m).dump() + "\n";
  return out;
}

}  // namespace bixformer
