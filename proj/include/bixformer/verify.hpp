#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bixformer/assignment.hpp"
#include "bixformer/autodiff.hpp"
#include "bixformer/cma.hpp"
#include "bixformer/gradcheck.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/model.hpp"
#include "bixformer/params.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/train.hpp"
#include "bixformer/umm.hpp"
#include "json.hpp"

namespace bixformer {

// ---------------------------------------------------------------------------
// Random instances

inline CostMatrix random_cost_matrix(std::size_t rows, std::size_t cols, bool integer, SplitMix64& rng) {
  CostMatrix c(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < cols; ++k)
      c(r, k) = integer ? static_cast<double>(rng.uniform_int(0, 9)) : rng.uniform() * 10.0 - 5.0;
  return c;
}

inline PredictionSet random_prediction(Modality m, std::size_t l, int k, std::size_t h, std::size_t w,
                                       SplitMix64& rng) {
  const std::size_t k1 = static_cast<std::size_t>(k) + 1;
  PredictionSet p{m, Tensor({l, k1}), Tensor({l, h, w})};
  for (std::size_t i = 0; i < l; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k1; ++j) s += (p.class_scores.at(i, j) = rng.uniform() + 1e-3);
    for (std::size_t j = 0; j < k1; ++j) p.class_scores.at(i, j) /= s;
  }
  for (double& v : p.masks.data()) v = rng.uniform();
  return p;
}

/// `u` labels of distinct random classes with random nonempty binary masks.
inline GroundTruthSet random_ground_truth(std::size_t u, int k, std::size_t h, std::size_t w, SplitMix64& rng) {
  std::vector<int> classes(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) classes[static_cast<std::size_t>(c)] = c + 1;
  for (std::size_t i = classes.size(); i > 1; --i)
    std::swap(classes[i - 1], classes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  std::vector<GroundTruthItem> items;
  for (std::size_t i = 0; i < u; ++i) {
    Tensor mask({h, w}, 0.0);
    for (double& v : mask.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    mask[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h * w) - 1))] = 1.0;
    items.push_back({classes[i], std::move(mask)});
  }
  return GroundTruthSet(h, w, k, std::move(items));
}

// ---------------------------------------------------------------------------
// Oracle sweeps

struct OracleSweepReport {
  std::size_t assignment_cases = 0;
  std::size_t assignment_mismatches = 0;
  std::size_t mam_cases = 0;
  std::size_t mam_mismatches = 0;

  bool passed() const { return assignment_mismatches == 0 && mam_mismatches == 0; }
};

/// Hungarian against exhaustive search on random matrices (rows <= 7), and
/// MAM cost against the exhaustive optimum over the union of both query sets
/// (2L <= 8, U <= 4). Integer matrices must agree exactly, real ones within
/// 1e-9.
inline OracleSweepReport oracle_sweep(std::uint64_t seed, std::size_t n_assignment = 1000, std::size_t n_mam = 500) {
  OracleSweepReport r;
  SplitMix64 rng(seed);
  for (std::size_t t = 0; t < n_assignment; ++t) {
    const auto rows = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const auto cols = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rows)));
    const bool integer = t % 2 == 0;
    const CostMatrix c = random_cost_matrix(rows, cols, integer, rng);
    const double fast = solve_hungarian(c).total_cost;
    const double exact = solve_bruteforce(c).total_cost;
    ++r.assignment_cases;
    if (integer ? fast != exact : std::abs(fast - exact) > 1e-9) ++r.assignment_mismatches;
  }
  for (std::size_t t = 0; t < n_mam; ++t) {
    const auto l = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto u = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(std::min<std::size_t>(4, 2 * l))));
    const int k = 5;
    const PredictionSet pr = random_prediction(Modality::kRgb, l, k, 3, 3, rng);
    const PredictionSet px = random_prediction(Modality::kX, l, k, 3, 3, rng);
    const GroundTruthSet gt = random_ground_truth(u, k, 3, 3, rng);
    const CostWeights w;
    const double got = mam(pr, px, gt, w).cost;
    const double best = solve_bruteforce(build_cost_matrix(pr, px, gt, w)).total_cost;
    ++r.mam_cases;
    if (std::abs(got - best) > 1e-9) ++r.mam_mismatches;
  }
  return r;
}

inline nlohmann::ordered_json oracle_report_to_json(const OracleSweepReport& r) {
  nlohmann::ordered_json o;
  o["assignment_cases"] = r.assignment_cases;
  o["assignment_mismatches"] = r.assignment_mismatches;
  o["mam_cases"] = r.mam_cases;
  o["mam_mismatches"] = r.mam_mismatches;
  o["passed"] = r.passed();
  return o;
}

// ---------------------------------------------------------------------------
// Gradient suite

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

namespace detail {

template <template <class> class P>
std::vector<Tensor> params_as_list(const P<Tensor>& p) {
  std::vector<Tensor> out;
  p.visit([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

template <template <class> class P>
P<Var> vars_from_list(std::span<const Var> vars, std::size_t& cursor) {
  P<Var> out;
  out.visit([&](const std::string&, Var& v) { v = vars[cursor++]; });
  return out;
}

/// Refiner with every weight drawn at random, so the zero-initialized heads
/// are exercised too.
inline RefinerParams random_refiner(std::size_t c, SplitMix64& rng) {
  RefinerParams p = init_refiner(c, rng);
  p.logvar_w = gaussian_tensor({c, c}, 0.3, rng);
  p.out_w = gaussian_tensor({c, c}, 0.3, rng);
  for (auto* gains : {&p.enc_gain, &p.dec_gain})
    for (Tensor& g : *gains)
      for (double& v : g.data()) v = 1.0 + 0.2 * rng.normal();
  for (auto* biases : {&p.enc_bias, &p.dec_bias})
    for (Tensor& b : *biases)
      for (double& v : b.data()) v = 0.2 * rng.normal();
  return p;
}

}  // namespace detail

/// A tiny scene for gradient checks: every class visible in both modalities
/// with noisy features.
inline Scene gradcheck_scene(std::size_t h, std::size_t w, std::size_t cf, int k, std::size_t u, SplitMix64& rng) {
  GroundTruthSet gt = random_ground_truth(u, k, h, w, rng);
  Tensor fr({cf, h, w}), fx({cf, h, w});
  for (double& v : fr.data()) v = rng.normal();
  for (double& v : fx.data()) v = rng.normal();
  return Scene{std::move(fr), std::move(fx), std::move(gt), true, true};
}

/// Central-difference checks of the forward pass with the segmentation loss,
/// the alignment loss, and their sum, under a matching frozen at the base
/// point and fixed refiner noise. Gradients smaller than `floor` are compared
/// on that absolute scale.
inline constexpr double kGradCheckFloor = 1e-5;

inline std::vector<NamedGradCheck> gradcheck_suite(std::uint64_t seed, double eps = 1e-5, double tol = 1e-4,
                                                   double floor = kGradCheckFloor) {
  SplitMix64 rng(seed);
  const ModelDims dims{3, 4, 3, 3};
  const Scene scene = gradcheck_scene(3, 4, dims.channels, dims.classes, 2, rng);
  ModelParams model = init_model(dims, rng);
  for (Tensor* b : {&model.proj_k_b, &model.proj_v_b, &model.classifier_b, &model.mask_proj_b})
    for (double& v : b->data()) v = 0.3 * rng.normal();
  const RefinerParams ref_rx = detail::random_refiner(dims.width, rng);
  const RefinerParams ref_xr = detail::random_refiner(dims.width, rng);
  const Tensor noise_r = gaussian_tensor({dims.queries, dims.width}, 1.0, rng);
  const Tensor noise_x = gaussian_tensor({dims.queries, dims.width}, 1.0, rng);
  const LossWeights lw;
  const AlignmentWeights aw;
  const CostWeights cw;

  Matching frozen;
  {
    const Predictions p = predict(model, scene);
    frozen = umm_full(p.r, p.x, scene.gt, cw).final_matching;
  }
  const auto classes_r = assigned_classes(frozen, scene.gt, Modality::kRgb);
  const auto classes_x = assigned_classes(frozen, scene.gt, Modality::kX);

  const auto model_list = detail::params_as_list(model);
  std::vector<Tensor> all = model_list;
  for (const auto* r : {&ref_rx, &ref_xr})
    for (Tensor& t : detail::params_as_list(*r)) all.push_back(std::move(t));

  const auto seg_part = [&](Tape& tape, const ModelVars& mv) {
    const ForwardOutput out = forward(tape, mv, scene);
    return std::pair{out, seg_loss(tape, out.r.logits, out.x.logits, scene.gt, frozen, lw)};
  };

  std::vector<NamedGradCheck> out;
  out.push_back({"forward_seg_loss", finite_diff_check(
                                         [&](Tape& tape, std::span<const Var> v) {
                                           std::size_t cur = 0;
                                           return seg_part(tape, detail::vars_from_list<BasicModel>(v, cur)).second;
                                         },
                                         model_list, eps, tol, floor)});

  std::vector<Tensor> align_params{gaussian_tensor({dims.queries, dims.width}, 1.0, rng),
                                   gaussian_tensor({dims.queries, dims.width}, 1.0, rng)};
  for (const auto* r : {&ref_rx, &ref_xr})
    for (Tensor& t : detail::params_as_list(*r)) align_params.push_back(std::move(t));
  const auto align_part = [&](Tape& tape, Var q_r, Var q_x, std::span<const Var> v, std::size_t cur) {
    const auto rx = detail::vars_from_list<BasicRefiner>(v, cur);
    const auto xr = detail::vars_from_list<BasicRefiner>(v, cur);
    return alignment_loss(tape, q_r, q_x, classes_r, classes_x, rx, xr, noise_r, noise_x, aw).loss;
  };
  out.push_back({"alignment_loss", finite_diff_check(
                                       [&](Tape& tape, std::span<const Var> v) {
                                         return align_part(tape, v[0], v[1], v, 2);
                                       },
                                       align_params, eps, tol, floor)});

  out.push_back({"total_loss", finite_diff_check(
                                   [&](Tape& tape, std::span<const Var> v) {
                                     std::size_t cur = 0;
                                     const auto [fwd, seg] = seg_part(tape, detail::vars_from_list<BasicModel>(v, cur));
                                     return add(seg, align_part(tape, fwd.r.queries, fwd.x.queries, v, cur));
                                   },
                                   all, eps, tol, floor)});
  return out;
}

inline nlohmann::ordered_json gradcheck_to_json(const std::vector<NamedGradCheck>& checks) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : checks) {
    nlohmann::ordered_json o;
    o["name"] = c.name;
    o["coordinates"] = c.report.coordinates;
    o["max_rel_error"] = c.report.max_rel_error;
    o["worst_param"] = c.report.worst_param;
    o["worst_index"] = c.report.worst_index;
    o["analytic"] = c.report.analytic;
    o["numeric"] = c.report.numeric;
    o["passed"] = c.report.passed();
    arr.push_back(std::move(o));
  }
  return arr;
}

}  // namespace bixformer
