#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bixformer/assignment.hpp"
#include "bixformer/error.hpp"
#include "bixformer/tensor.hpp"

namespace bixformer {

enum class Modality { kRgb, kX };

inline const char* modality_tag(Modality m) { return m == Modality::kRgb ? "r" : "x"; }

inline constexpr int kNoneClass = 0;
inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kBceClamp = 1e-7;

struct GroundTruthItem {
  int class_id = 0;  // 1..K
  Tensor mask;       // H x W, values in {0, 1}
};

/// Labels of one image: distinct classes, each with a binary mask.
class GroundTruthSet {
 public:
  GroundTruthSet(std::size_t h, std::size_t w, int k, std::vector<GroundTruthItem> items = {})
      : h_(h), w_(w), k_(k), items_(std::move(items)) {
    if (h_ == 0 || w_ == 0 || k_ < 1) throw ContractError("ground truth needs positive H, W, K");
    if (items_.size() > static_cast<std::size_t>(k_)) throw ContractError("more labels than classes");
    std::set<int> seen;
    for (const auto& it : items_) {
      if (it.class_id < 1 || it.class_id > k_)
        throw ContractError("class id " + std::to_string(it.class_id) + " outside 1.." + std::to_string(k_));
      if (!seen.insert(it.class_id).second)
        throw ContractError("duplicate class id " + std::to_string(it.class_id));
      if (it.mask.shape() != Shape{h_, w_})
        throw DimensionError("mask " + shape_str(it.mask.shape()) + " for a " + std::to_string(h_) + "x" +
                             std::to_string(w_) + " image");
      for (double v : it.mask.data())
        if (v != 0.0 && v != 1.0) throw ContractError("ground-truth masks must be binary");
    }
  }

  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  int num_classes() const noexcept { return k_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const std::vector<GroundTruthItem>& items() const noexcept { return items_; }

  int class_of(std::size_t label) const { return items_.at(label).class_id; }
  const Tensor& mask_of(std::size_t label) const { return items_.at(label).mask; }

 private:
  std::size_t h_, w_;
  int k_;
  std::vector<GroundTruthItem> items_;
};

/// Query outputs of one modality: class probabilities over K+1 classes
/// (column 0 is None) and soft masks.
struct PredictionSet {
  Modality modality = Modality::kRgb;
  Tensor class_scores;  // L x (K+1)
  Tensor masks;         // L x H x W

  std::size_t num_queries() const { return class_scores.rows(); }
  int num_classes() const { return static_cast<int>(class_scores.cols()) - 1; }

  void validate() const {
    if (class_scores.rank() != 2 || masks.rank() != 3 || class_scores.dim(0) != masks.dim(0))
      throw DimensionError("prediction shapes " + shape_str(class_scores.shape()) + " / " +
                           shape_str(masks.shape()));
    for (std::size_t i = 0; i < class_scores.rows(); ++i) {
      double s = 0.0;
      for (double v : class_scores.row(i)) {
        if (!(v >= 0.0)) throw ContractError("negative or non-finite class score");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ContractError("class score row does not sum to 1");
    }
    for (double v : masks.data())
      if (!(v >= 0.0 && v <= 1.0)) throw ContractError("mask value outside [0, 1]");
  }
};

struct CostWeights {
  double cls = 1.0;
  double dice = 1.0;
  double bce = 1.0;
};

/// Negative predicted probability of the target class.
inline double class_cost(std::span<const double> probs, int y_class) {
  if (y_class < 1 || static_cast<std::size_t>(y_class) >= probs.size())
    throw ContractError("class cost target " + std::to_string(y_class) + " is not a real class");
  return -probs[static_cast<std::size_t>(y_class)];
}

inline double dice_cost(std::span<const double> m, std::span<const double> g) {
  if (m.size() != g.size())
    throw DimensionError("dice of " + std::to_string(m.size()) + " and " + std::to_string(g.size()) + " pixels");
  double inter = 0.0, sm = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    inter += m[i] * g[i];
    sm += m[i];
    sg += g[i];
  }
  return 1.0 - (2.0 * inter + kDiceSmooth) / (sm + sg + kDiceSmooth);
}

inline double dice_cost(const Tensor& m, const Tensor& g) {
  if (m.shape() != g.shape()) throw DimensionError("dice of " + shape_str(m.shape()) + " and " + shape_str(g.shape()));
  return dice_cost(m.data(), g.data());
}

/// Mean pixel binary cross-entropy with the prediction clamped to
/// [1e-7, 1 - 1e-7].
inline double bce_cost(std::span<const double> m, std::span<const double> g) {
  if (m.size() != g.size())
    throw DimensionError("bce of " + std::to_string(m.size()) + " and " + std::to_string(g.size()) + " pixels");
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double p = std::clamp(m[i], kBceClamp, 1.0 - kBceClamp);
    acc -= g[i] * std::log(p) + (1.0 - g[i]) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(m.size());
}

inline double bce_cost(const Tensor& m, const Tensor& g) {
  if (m.shape() != g.shape()) throw DimensionError("bce of " + shape_str(m.shape()) + " and " + shape_str(g.shape()));
  return bce_cost(m.data(), g.data());
}

/// Cost of pairing one query (probability row, flattened mask) with one label.
inline double match_cost(std::span<const double> probs, std::span<const double> mask, const GroundTruthSet& gt,
                         std::size_t label, const CostWeights& w) {
  const auto g = gt.mask_of(label).data();
  double c = 0.0;
  if (w.cls != 0.0) c += w.cls * class_cost(probs, gt.class_of(label));
  if (w.dice != 0.0) c += w.dice * dice_cost(mask, g);
  if (w.bce != 0.0) c += w.bce * bce_cost(mask, g);
  return c;
}

/// Query-by-label cost matrix. With several prediction sets the row blocks
/// follow their order (RGB first, then X, by convention of the callers).
inline CostMatrix build_cost_matrix(std::span<const PredictionSet* const> preds, const GroundTruthSet& gt,
                                    const CostWeights& w) {
  if (preds.empty()) throw ContractError("no prediction sets");
  std::size_t rows = 0;
  for (const PredictionSet* p : preds) {
    if (p->num_classes() != gt.num_classes())
      throw ContractError("prediction has K=" + std::to_string(p->num_classes()) + ", ground truth K=" +
                          std::to_string(gt.num_classes()));
    if (p->masks.rank() != 3 || p->masks.dim(1) != gt.height() || p->masks.dim(2) != gt.width())
      throw DimensionError("prediction masks " + shape_str(p->masks.shape()) + " vs image " +
                           std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
    rows += p->num_queries();
  }
  CostMatrix c(rows, gt.size());
  std::size_t r = 0;
  for (const PredictionSet* p : preds)
    for (std::size_t q = 0; q < p->num_queries(); ++q, ++r)
      for (std::size_t k = 0; k < gt.size(); ++k)
        c(r, k) = match_cost(p->class_scores.row(q), p->masks.row(q), gt, k, w);
  return c;
}

inline CostMatrix build_cost_matrix(const PredictionSet& pred, const GroundTruthSet& gt, const CostWeights& w) {
  const PredictionSet* one[] = {&pred};
  return build_cost_matrix(one, gt, w);
}

inline CostMatrix build_cost_matrix(const PredictionSet& rgb, const PredictionSet& x, const GroundTruthSet& gt,
                                    const CostWeights& w) {
  const PredictionSet* both[] = {&rgb, &x};
  return build_cost_matrix(both, gt, w);
}

}  // namespace bixformer
