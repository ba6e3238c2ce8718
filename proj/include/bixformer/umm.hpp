#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bixformer/assignment.hpp"
#include "bixformer/autodiff.hpp"
#include "bixformer/error.hpp"
#include "bixformer/matching_costs.hpp"
#include "json.hpp"

namespace bixformer {

enum class MatchSource { kMam, kCm, kNone };

inline const char* source_tag(MatchSource s) {
  switch (s) {
    case MatchSource::kMam: return "mam";
    case MatchSource::kCm: return "cm";
    case MatchSource::kNone: return "none";
  }
  return "none";
}

/// One query of the RGB+X union. Union index q < L is RGB, q >= L is X.
/// `label` indexes the ground-truth set; empty means None.
struct MatchPair {
  std::size_t query = 0;
  Modality modality = Modality::kRgb;
  std::optional<std::size_t> label;
  MatchSource source = MatchSource::kNone;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

/// Exactly one entry per union query, in union order.
struct Matching {
  std::size_t queries_per_modality = 0;
  std::vector<MatchPair> pairs;

  static Matching unmatched(std::size_t l) {
    Matching m;
    m.queries_per_modality = l;
    m.pairs.resize(2 * l);
    for (std::size_t q = 0; q < 2 * l; ++q) m.pairs[q] = {q, q < l ? Modality::kRgb : Modality::kX, std::nullopt,
                                                          MatchSource::kNone};
    return m;
  }

  std::size_t size() const { return pairs.size(); }
  const MatchPair& operator[](std::size_t q) const { return pairs.at(q); }

  friend bool operator==(const Matching&, const Matching&) = default;
};

/// (union query, label) pairs produced by complementary matching in one modality.
struct Fragment {
  Modality modality = Modality::kRgb;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double cost = 0.0;
};

struct MamResult {
  Matching matching;
  double cost = 0.0;
};

/// Step 1: a single assignment over the union of RGB and X queries.
inline MamResult mam(const PredictionSet& pred_r, const PredictionSet& pred_x, const GroundTruthSet& gt,
                     const CostWeights& w) {
  const std::size_t l = pred_r.num_queries();
  if (pred_x.num_queries() != l) throw ContractError("RGB and X query counts differ");
  if (2 * l < gt.size())
    throw InfeasibleError(std::to_string(2 * l) + " union queries for " + std::to_string(gt.size()) + " labels");
  MamResult out{Matching::unmatched(l), 0.0};
  if (gt.empty()) return out;
  const Assignment a = solve_hungarian(build_cost_matrix(pred_r, pred_x, gt, w));
  for (const auto& p : a.pairs) {
    out.matching.pairs[p.row].label = p.col;
    out.matching.pairs[p.row].source = MatchSource::kMam;
  }
  out.cost = a.total_cost;
  return out;
}

struct Residuals {
  std::vector<std::size_t> assigned_r;    // Y_r, label indices ascending
  std::vector<std::size_t> assigned_x;    // Y_x
  std::vector<std::size_t> unassigned_r;  // Y \ Y_r
  std::vector<std::size_t> unassigned_x;  // Y \ Y_x
  std::vector<std::size_t> free_r;        // RGB union indices left None by MAM
  std::vector<std::size_t> free_x;        // X union indices left None by MAM
};

/// Step 2: labels each modality already holds, the labels it still lacks,
/// and the queries it has left.
inline Residuals split_and_residuals(const Matching& mam_matching, const GroundTruthSet& gt) {
  Residuals r;
  std::vector<char> in_r(gt.size(), 0), in_x(gt.size(), 0);
  for (const MatchPair& p : mam_matching.pairs) {
    const bool rgb = p.modality == Modality::kRgb;
    if (p.label) {
      if (*p.label >= gt.size()) throw ContractError("matching refers to a missing label");
      (rgb ? in_r : in_x)[*p.label] = 1;
    } else {
      (rgb ? r.free_r : r.free_x).push_back(p.query);
    }
  }
  for (std::size_t k = 0; k < gt.size(); ++k) {
    (in_r[k] ? r.assigned_r : r.unassigned_r).push_back(k);
    (in_x[k] ? r.assigned_x : r.unassigned_x).push_back(k);
  }
  return r;
}

namespace detail {

/// Hungarian over one modality's candidate queries (union indices) and labels.
inline Fragment solve_within_modality(const PredictionSet& pred, Modality modality, std::size_t offset,
                                      const std::vector<std::size_t>& queries, const std::vector<std::size_t>& labels,
                                      const GroundTruthSet& gt, const CostWeights& w) {
  Fragment f{modality, {}, 0.0};
  if (labels.empty()) return f;
  if (queries.size() < labels.size())
    throw InfeasibleError(std::string("modality ") + modality_tag(modality) + " has " +
                          std::to_string(queries.size()) + " free queries for " + std::to_string(labels.size()) +
                          " unassigned labels");
  CostMatrix c(queries.size(), labels.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const std::size_t q = queries[i] - offset;
    for (std::size_t k = 0; k < labels.size(); ++k)
      c(i, k) = match_cost(pred.class_scores.row(q), pred.masks.row(q), gt, labels[k], w);
  }
  const Assignment a = solve_hungarian(c);
  for (const auto& p : a.pairs) f.pairs.emplace_back(queries[p.row], labels[p.col]);
  f.cost = a.total_cost;
  return f;
}

}  // namespace detail

/// Step 3: per-modality assignment of each modality's missing labels to its
/// free queries.
inline std::pair<Fragment, Fragment> cm(const PredictionSet& pred_r, const PredictionSet& pred_x,
                                        const GroundTruthSet& gt, const Residuals& res, const CostWeights& w) {
  const std::size_t l = pred_r.num_queries();
  return {detail::solve_within_modality(pred_r, Modality::kRgb, 0, res.free_r, res.unassigned_r, gt, w),
          detail::solve_within_modality(pred_x, Modality::kX, l, res.free_x, res.unassigned_x, gt, w)};
}

/// Step 4: combines MAM with the two complementary fragments.
///
/// Each fragment is widened to the full union with None placeholders and
/// cleared wherever MAM already assigned the query. The final label is the
/// elementwise max over the three sources (class ids with None = 0, masks
/// with None = all-zero); since class ids are unique within an image, the
/// max class identifies the label and the max mask is that label's mask.
/// The result is cross-checked against the source-priority rule
/// MAM > CM > None.
inline Matching merge(const Matching& mam_matching, const Fragment& frag_r, const Fragment& frag_x,
                      const GroundTruthSet& gt) {
  const std::size_t l = mam_matching.queries_per_modality, n = mam_matching.size();
  if (n != 2 * l) throw ContractError("MAM matching does not cover the union");

  auto widen = [&](const Fragment& f) {
    std::vector<std::optional<std::size_t>> out(n);
    for (auto [q, label] : f.pairs) {
      if (q >= n) throw ContractError("fragment query out of range");
      const bool rgb = q < l;
      if (rgb != (f.modality == Modality::kRgb))
        throw MergeConflictError("query " + std::to_string(q) + " is outside the fragment's modality");
      if (out[q]) throw MergeConflictError("query " + std::to_string(q) + " appears twice in a fragment");
      out[q] = label;
    }
    for (std::size_t q = 0; q < n; ++q)
      if (mam_matching.pairs[q].label) out[q].reset();
    return out;
  };
  const auto sr = widen(frag_r), sx = widen(frag_x);

  auto class_or_none = [&](const std::optional<std::size_t>& label) {
    return label ? gt.class_of(*label) : kNoneClass;
  };

  Matching out = mam_matching;
  for (std::size_t q = 0; q < n; ++q) {
    const auto& a = mam_matching.pairs[q].label;
    const int sources = int(a.has_value()) + int(sr[q].has_value()) + int(sx[q].has_value());
    if (sources > 1) throw MergeConflictError("query " + std::to_string(q) + " carries two labels");

    const int c_star = std::max({class_or_none(a), class_or_none(sr[q]), class_or_none(sx[q])});
    std::optional<std::size_t> label;
    if (c_star != kNoneClass)
      for (std::size_t k = 0; k < gt.size(); ++k)
        if (gt.class_of(k) == c_star) label = k;

    const std::optional<std::size_t> priority = a ? a : (sr[q] ? sr[q] : sx[q]);
    if (label != priority) throw MergeConflictError("max rule and priority rule disagree at query " + std::to_string(q));

    out.pairs[q].label = label;
    out.pairs[q].source = a ? MatchSource::kMam : (label ? MatchSource::kCm : MatchSource::kNone);
  }
  return out;
}

enum class MatchingMode { kUmm, kMamOnly, kCmOnly };

struct UmmDiagnostics {
  double mam_cost = 0.0;
  double cm_cost_r = 0.0;
  double cm_cost_x = 0.0;
  bool cm_invoked = false;
  /// For each label: modality of its MAM query (empty in CM-only mode).
  std::vector<std::pair<int, Modality>> mam_attribution;
};

struct UmmResult {
  Matching final_matching;
  Matching mam_matching;
  Fragment frag_r;
  Fragment frag_x;
  UmmDiagnostics diagnostics;
};

/// Runs the matching pipeline in the requested configuration. kUmm is the
/// full MAM -> residuals -> CM -> merge sequence; kMamOnly stops after MAM;
/// kCmOnly matches each modality against all labels independently.
inline UmmResult umm_full(const PredictionSet& pred_r, const PredictionSet& pred_x, const GroundTruthSet& gt,
                          const CostWeights& w, MatchingMode mode = MatchingMode::kUmm) {
  const std::size_t l = pred_r.num_queries();
  if (pred_x.num_queries() != l) throw ContractError("RGB and X query counts differ");
  UmmResult out;
  out.frag_r.modality = Modality::kRgb;
  out.frag_x.modality = Modality::kX;

  if (mode == MatchingMode::kCmOnly) {
    if (l < gt.size())
      throw InfeasibleError(std::to_string(l) + " queries per modality for " + std::to_string(gt.size()) + " labels");
    out.mam_matching = Matching::unmatched(l);
    Residuals all;
    for (std::size_t k = 0; k < gt.size(); ++k) {
      all.unassigned_r.push_back(k);
      all.unassigned_x.push_back(k);
    }
    for (std::size_t q = 0; q < l; ++q) {
      all.free_r.push_back(q);
      all.free_x.push_back(l + q);
    }
    std::tie(out.frag_r, out.frag_x) = cm(pred_r, pred_x, gt, all, w);
    out.diagnostics.cm_invoked = true;
  } else {
    MamResult m = mam(pred_r, pred_x, gt, w);
    out.mam_matching = std::move(m.matching);
    out.diagnostics.mam_cost = m.cost;
    for (const MatchPair& p : out.mam_matching.pairs)
      if (p.label) out.diagnostics.mam_attribution.emplace_back(gt.class_of(*p.label), p.modality);
    std::sort(out.diagnostics.mam_attribution.begin(), out.diagnostics.mam_attribution.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    if (mode == MatchingMode::kMamOnly) {
      out.final_matching = out.mam_matching;
      return out;
    }
    if (l < gt.size())
      throw InfeasibleError(std::to_string(l) + " queries per modality for " + std::to_string(gt.size()) + " labels");
    const Residuals res = split_and_residuals(out.mam_matching, gt);
    std::tie(out.frag_r, out.frag_x) = cm(pred_r, pred_x, gt, res, w);
    out.diagnostics.cm_invoked = true;
  }
  out.diagnostics.cm_cost_r = out.frag_r.cost;
  out.diagnostics.cm_cost_x = out.frag_x.cost;
  out.final_matching = merge(out.mam_matching, out.frag_r, out.frag_x, gt);
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation loss

/// Differentiable head outputs of one modality, pre-activation.
struct QueryLogits {
  Var class_logits;  // L x (K+1); probabilities are the row softmax
  Var mask_logits;   // L x (H*W); masks are the elementwise sigmoid
};

struct LossWeights {
  double cls = 1.0;
  double dice = 1.0;
  double bce = 1.0;
  double none_weight = 0.1;
};

namespace detail {

inline Var modality_seg_loss(Tape& tape, const QueryLogits& head, const GroundTruthSet& gt, const Matching& m,
                             std::size_t offset, const LossWeights& w) {
  const Tensor& cl = head.class_logits.value();
  const Tensor& ml = head.mask_logits.value();
  const std::size_t l = cl.rows(), hw = gt.height() * gt.width();
  if (cl.cols() != static_cast<std::size_t>(gt.num_classes()) + 1 || ml.rows() != l || ml.cols() != hw)
    throw ContractError("head outputs " + shape_str(cl.shape()) + "/" + shape_str(ml.shape()) +
                        " do not fit the ground truth");

  Tensor ce_weight(cl.shape(), 0.0);   // weighted one-hot of the target class
  Tensor target(ml.shape(), 0.0);      // mask targets; None rows stay zero
  Tensor matched({l, 1}, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    const auto& label = m.pairs[offset + i].label;
    if (label) {
      ce_weight.at(i, static_cast<std::size_t>(gt.class_of(*label))) = 1.0;
      const auto g = gt.mask_of(*label).data();
      std::copy(g.begin(), g.end(), target.row(i).begin());
      matched[i] = 1.0;
    } else {
      ce_weight.at(i, kNoneClass) = w.none_weight;
    }
  }

  Var loss = tape.constant(Tensor::scalar(0.0));
  if (w.cls != 0.0) {
    Var ce = scale(sum(mul(log_softmax_rows(head.class_logits), tape.constant(ce_weight))), -w.cls);
    loss = add(loss, ce);
  }
  if (w.bce != 0.0) {
    Tensor inv_target = target;
    for (double& v : inv_target.data()) v = 1.0 - v;
    Var pos = mul(log_sigmoid(head.mask_logits), tape.constant(target));
    Var neg = mul(log_sigmoid(scale(head.mask_logits, -1.0)), tape.constant(inv_target));
    Var bce = scale(sum(add(pos, neg)), -w.bce / static_cast<double>(hw));
    loss = add(loss, bce);
  }
  if (w.dice != 0.0) {
    bool any = false;
    for (double v : matched.data()) any = any || v != 0.0;
    if (any) {
      Var probs = sigmoid(head.mask_logits);
      Var g = tape.constant(target);
      Var num = add_scalar(scale(row_sum(mul(probs, g)), 2.0), kDiceSmooth);
      Var den = add_scalar(add(row_sum(probs), row_sum(g)), kDiceSmooth);
      Var dice = sub(tape.constant(Tensor({l, 1}, 1.0)), div(num, den));
      loss = add(loss, scale(sum(mul(dice, tape.constant(matched))), w.dice));
    }
  }
  return loss;
}

}  // namespace detail

/// Segmentation loss under a final matching, summed over all union queries:
/// cross-entropy to the assigned class (None targets weighted by
/// none_weight), mean-pixel BCE to the assigned mask (all-zero for None),
/// and dice for matched queries only.
inline Var seg_loss(Tape& tape, const QueryLogits& rgb, const QueryLogits& x, const GroundTruthSet& gt,
                    const Matching& final_matching, const LossWeights& w) {
  const std::size_t l = rgb.class_logits.value().rows();
  if (final_matching.size() != 2 * l || x.class_logits.value().rows() != l)
    throw ContractError("matching over " + std::to_string(final_matching.size()) + " queries for " +
                        std::to_string(2 * l) + " predictions");
  return add(detail::modality_seg_loss(tape, rgb, gt, final_matching, 0, w),
             detail::modality_seg_loss(tape, x, gt, final_matching, l, w));
}

// ---------------------------------------------------------------------------
// Serialization

/// JSON array of {query, modality, class, source} in that key order.
inline nlohmann::ordered_json matching_to_json(const Matching& m, const GroundTruthSet& gt) {
  auto arr = nlohmann::ordered_json::array();
  for (const MatchPair& p : m.pairs) {
    nlohmann::ordered_json o;
    o["query"] = p.query;
    o["modality"] = modality_tag(p.modality);
    o["class"] = p.label ? nlohmann::ordered_json(gt.class_of(*p.label)) : nlohmann::ordered_json(nullptr);
    o["source"] = source_tag(p.source);
    arr.push_back(std::move(o));
  }
  return arr;
}

inline nlohmann::ordered_json diagnostics_to_json(const UmmDiagnostics& d) {
  nlohmann::ordered_json o;
  o["mam_cost"] = d.mam_cost;
  o["cm_cost_r"] = d.cm_cost_r;
  o["cm_cost_x"] = d.cm_cost_x;
  o["cm_invoked"] = d.cm_invoked;
  auto attr = nlohmann::ordered_json::array();
  for (auto [cls, mod] : d.mam_attribution) {
    nlohmann::ordered_json e;
    e["class"] = cls;
    e["modality"] = modality_tag(mod);
    attr.push_back(std::move(e));
  }
  o["mam_attribution"] = std::move(attr);
  return o;
}

}  // namespace bixformer
