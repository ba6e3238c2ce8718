#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bixformer/cma.hpp"
#include "bixformer/error.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/model.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/umm.hpp"
#include "json.hpp"

namespace bixformer {

struct EvalReport {
  std::string subset;
  std::map<int, double> per_class_iou;
  double mean_iou = 0.0;
};

/// Per-pixel ground-truth class; 0 marks pixels no label covers, which are
/// ignored by the metric.
inline std::vector<int> render_gt(const GroundTruthSet& gt) {
  std::vector<int> out(gt.height() * gt.width(), 0);
  for (const auto& item : gt.items())
    for (std::size_t p = 0; p < out.size(); ++p)
      if (item.mask[p] != 0.0) out[p] = item.class_id;
  return out;
}

/// Intersection and union pixel counts per class, accumulated over scenes.
class IouAccumulator {
 public:
  explicit IouAccumulator(int k) : k_(k), inter_(static_cast<std::size_t>(k) + 1, 0), uni_(inter_) {}

  void add(const Tensor& pred_map, const GroundTruthSet& gt) {
    if (pred_map.shape() != Shape{gt.height(), gt.width()})
      throw DimensionError("prediction map " + shape_str(pred_map.shape()) + " vs image " +
                           std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
    if (gt.num_classes() != k_) throw ContractError("class count differs from the accumulator");
    const auto truth = render_gt(gt);
    for (std::size_t p = 0; p < truth.size(); ++p) {
      const int g = truth[p];
      if (g == 0) continue;
      const int pc = static_cast<int>(pred_map[p]);
      if (pc < 1 || pc > k_) throw ContractError("prediction map holds class " + std::to_string(pc));
      if (pc == g) {
        ++inter_[static_cast<std::size_t>(g)];
        ++uni_[static_cast<std::size_t>(g)];
      } else {
        ++uni_[static_cast<std::size_t>(g)];
        ++uni_[static_cast<std::size_t>(pc)];
      }
    }
  }

  /// Classes with an empty union (absent from prediction and ground truth
  /// over everything accumulated) are left out.
  EvalReport report(std::string subset = {}) const {
    EvalReport r{std::move(subset), {}, 0.0};
    for (int c = 1; c <= k_; ++c) {
      const auto u = uni_[static_cast<std::size_t>(c)];
      if (u == 0) continue;
      r.per_class_iou[c] = static_cast<double>(inter_[static_cast<std::size_t>(c)]) / static_cast<double>(u);
    }
    double s = 0.0;
    for (const auto& [c, v] : r.per_class_iou) s += v;
    r.mean_iou = r.per_class_iou.empty() ? 0.0 : s / static_cast<double>(r.per_class_iou.size());
    return r;
  }

 private:
  int k_;
  std::vector<std::uint64_t> inter_, uni_;
};

inline EvalReport miou(const Tensor& pred_map, const GroundTruthSet& gt) {
  IouAccumulator acc(gt.num_classes());
  acc.add(pred_map, gt);
  return acc.report();
}

enum class IouAveraging { kGlobal, kPerImage };

/// Modality-presence pattern: "r", "x" or "rx".
struct Presence {
  bool r = true;
  bool x = true;
};

inline Presence parse_subset(const std::string& tag) {
  if (tag == "r") return {true, false};
  if (tag == "x") return {false, true};
  if (tag == "rx") return {true, true};
  throw ConfigError("unknown modality subset '" + tag + "' (expected r, x or rx)");
}

/// Fused semantic map for one scene under a presence pattern; absent
/// modalities are zero-filled before the forward pass.
inline Tensor segment_scene(const ModelParams& params, const Scene& scene, Presence presence) {
  const Predictions p = predict(params, scene.with_presence(presence.r, presence.x));
  return fuse_and_segment(p.r, p.x);
}

struct SubsetEvaluation {
  std::vector<EvalReport> reports;  // in request order
  EvalReport mean;                  // subset "Mean": average of subset mIoUs
};

inline SubsetEvaluation subset_eval(const ModelParams& params, const std::vector<Scene>& scenes,
                                    const std::vector<std::string>& subsets,
                                    IouAveraging averaging = IouAveraging::kGlobal) {
  if (scenes.empty()) throw ContractError("no scenes to evaluate");
  std::vector<Presence> patterns;
  for (const auto& tag : subsets) patterns.push_back(parse_subset(tag));
  const int k = scenes.front().gt.num_classes();

  SubsetEvaluation out;
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    EvalReport report;
    if (averaging == IouAveraging::kGlobal) {
      IouAccumulator acc(k);
      for (const Scene& scene : scenes) acc.add(segment_scene(params, scene, patterns[s]), scene.gt);
      report = acc.report(subsets[s]);
    } else {
      std::map<int, std::pair<double, int>> sums;
      double mean_sum = 0.0;
      for (const Scene& scene : scenes) {
        const EvalReport one = miou(segment_scene(params, scene, patterns[s]), scene.gt);
        for (const auto& [c, v] : one.per_class_iou) {
          sums[c].first += v;
          ++sums[c].second;
        }
        mean_sum += one.mean_iou;
      }
      report.subset = subsets[s];
      for (const auto& [c, sv] : sums) report.per_class_iou[c] = sv.first / sv.second;
      report.mean_iou = mean_sum / static_cast<double>(scenes.size());
    }
    out.reports.push_back(std::move(report));
  }
  out.mean.subset = "Mean";
  for (const auto& r : out.reports) out.mean.mean_iou += r.mean_iou;
  if (!out.reports.empty()) out.mean.mean_iou /= static_cast<double>(out.reports.size());
  return out;
}

// ---------------------------------------------------------------------------
// Label distribution of MAM assignments

struct ModalityShare {
  double rgb = 0.0;
  double x = 0.0;
  std::size_t count = 0;
};

/// For each class, the fraction of its MAM assignments that landed on RGB
/// and on X queries. Classes never MAM-assigned are omitted.
inline std::map<int, ModalityShare> label_distribution(const std::vector<Matching>& matchings,
                                                       const std::vector<const GroundTruthSet*>& gts) {
  if (matchings.size() != gts.size()) throw ContractError("one ground-truth set per matching required");
  std::map<int, std::pair<std::size_t, std::size_t>> counts;
  for (std::size_t s = 0; s < matchings.size(); ++s)
    for (const MatchPair& p : matchings[s].pairs) {
      if (p.source != MatchSource::kMam || !p.label) continue;
      auto& c = counts[gts[s]->class_of(*p.label)];
      (p.modality == Modality::kRgb ? c.first : c.second) += 1;
    }
  std::map<int, ModalityShare> out;
  for (const auto& [cls, c] : counts) {
    const double n = static_cast<double>(c.first + c.second);
    out[cls] = {static_cast<double>(c.first) / n, static_cast<double>(c.second) / n, c.first + c.second};
  }
  return out;
}

struct DatasetMatchings {
  std::vector<Matching> matchings;
  std::vector<const GroundTruthSet*> gts;
  std::vector<QuerySet> queries_r;  // classes from the final matching
  std::vector<QuerySet> queries_x;
};

/// Runs the trained model on every scene with both modalities and matches
/// its predictions to the ground truth.
inline DatasetMatchings match_dataset(const ModelParams& params, const std::vector<Scene>& scenes,
                                      const CostWeights& w, MatchingMode mode = MatchingMode::kUmm) {
  DatasetMatchings out;
  for (const Scene& scene : scenes) {
    Predictions p = predict(params, scene);
    UmmResult u = umm_full(p.r, p.x, scene.gt, w, mode);
    p.queries_r.assigned_class = assigned_classes(u.final_matching, scene.gt, Modality::kRgb);
    p.queries_x.assigned_class = assigned_classes(u.final_matching, scene.gt, Modality::kX);
    out.matchings.push_back(std::move(u.final_matching));
    out.gts.push_back(&scene.gt);
    out.queries_r.push_back(std::move(p.queries_r));
    out.queries_x.push_back(std::move(p.queries_x));
  }
  return out;
}

struct DistanceDiagnostics {
  double modality_distance = 0.0;
  double class_distance = 0.0;
  std::size_t scenes = 0;  // scenes that contributed
};

/// Modality and class distances of matched queries, averaged over scenes
/// that have at least one label.
inline DistanceDiagnostics distance_diagnostics(const DatasetMatchings& m) {
  DistanceDiagnostics d;
  for (std::size_t s = 0; s < m.matchings.size(); ++s) {
    if (m.gts[s]->empty()) continue;
    d.modality_distance += modality_distance(m.queries_r[s], m.queries_x[s]);
    d.class_distance += class_distance(m.queries_r[s], m.queries_x[s]);
    ++d.scenes;
  }
  if (d.scenes) {
    d.modality_distance /= static_cast<double>(d.scenes);
    d.class_distance /= static_cast<double>(d.scenes);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Output formats

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json o;
  o["subset"] = r.subset;
  nlohmann::ordered_json per;
  for (const auto& [c, v] : r.per_class_iou) per[std::to_string(c)] = v;
  o["per_class_iou"] = per.is_null() ? nlohmann::ordered_json::object() : per;
  o["mean_iou"] = r.mean_iou;
  return o;
}

inline nlohmann::ordered_json evaluation_to_json(const SubsetEvaluation& e) {
  nlohmann::ordered_json o;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : e.reports) arr.push_back(report_to_json(r));
  o["reports"] = std::move(arr);
  o["mean"] = e.mean.mean_iou;
  return o;
}

/// Aligned plain-text table: one row per subset, one column per class.
inline std::string evaluation_table(const SubsetEvaluation& e, int k) {
  std::ostringstream os;
  char buf[32];
  os << "subset ";
  for (int c = 1; c <= k; ++c) {
    std::snprintf(buf, sizeof buf, "%8s", ("c" + std::to_string(c)).c_str());
    os << buf;
  }
  os << "    mIoU\n";
  for (const auto& r : e.reports) {
    std::snprintf(buf, sizeof buf, "%-7s", r.subset.c_str());
    os << buf;
    for (int c = 1; c <= k; ++c) {
      auto it = r.per_class_iou.find(c);
      if (it == r.per_class_iou.end())
        std::snprintf(buf, sizeof buf, "%8s", "-");
      else
        std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * it->second);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%8.2f\n", 100.0 * r.mean_iou);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-7s", "Mean");
  os << buf << std::string(static_cast<std::size_t>(8 * k), ' ');
  std::snprintf(buf, sizeof buf, "%8.2f\n", 100.0 * e.mean.mean_iou);
  os << buf;
  return os.str();
}

/// class,frac_rgb,frac_x rows.
inline std::string distribution_csv(const std::map<int, ModalityShare>& dist) {
  std::ostringstream os;
  os << "class,frac_rgb,frac_x\n";
  char buf[96];
  for (const auto& [c, s] : dist) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f\n", c, s.rgb, s.x);
    os << buf;
  }
  return os.str();
}

}  // namespace bixformer
