#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/error.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/mmd.hpp"
#include "bixformer/params.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/umm.hpp"

namespace bixformer {

/// Queries of one modality with the class each received in the final
/// matching (0 for None).
struct QuerySet {
  Tensor queries;  // L x C
  std::vector<int> assigned_class;
  Modality modality = Modality::kRgb;
};

/// Per-query classes of one modality's block of a final matching.
inline std::vector<int> assigned_classes(const Matching& m, const GroundTruthSet& gt, Modality modality) {
  const std::size_t l = m.queries_per_modality, offset = modality == Modality::kRgb ? 0 : l;
  std::vector<int> out(l, kNoneClass);
  for (std::size_t i = 0; i < l; ++i)
    if (const auto& label = m.pairs.at(offset + i).label) out[i] = gt.class_of(*label);
  return out;
}

/// Stable ascending order of query indices by class.
inline std::vector<std::size_t> class_order(std::span<const int> classes) {
  std::vector<std::size_t> idx(classes.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return classes[a] < classes[b]; });
  return idx;
}

inline QuerySet reorder_by_class(const QuerySet& qs) {
  if (qs.assigned_class.size() != qs.queries.rows()) throw ContractError("one class per query required");
  const auto order = class_order(qs.assigned_class);
  QuerySet out{select_rows(qs.queries, order), {}, qs.modality};
  for (auto i : order) out.assigned_class.push_back(qs.assigned_class[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Refiner

inline constexpr std::size_t kRefinerDepth = 4;

/// VAE refiner: an encoder of Linear-LayerNorm-ReLU blocks with mean and
/// log-variance heads, and a mirrored decoder ending in a linear head. The
/// decoder output is added to the refiner input.
template <class T>
struct BasicRefiner {
  std::array<T, kRefinerDepth> enc_w, enc_gain, enc_bias;
  T mu_w, logvar_w;
  std::array<T, kRefinerDepth> dec_w, dec_gain, dec_bias;
  T out_w;

  template <class F>
  void visit(F&& f) { visit_fields(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_fields(*this, f); }

 private:
  template <class Self, class F>
  static void visit_fields(Self& s, F& f) {
    for (std::size_t i = 0; i < kRefinerDepth; ++i) {
      const std::string p = "enc" + std::to_string(i) + "_";
      f(p + "w", s.enc_w[i]);
      f(p + "gain", s.enc_gain[i]);
      f(p + "bias", s.enc_bias[i]);
    }
    f("mu_w", s.mu_w);
    f("logvar_w", s.logvar_w);
    for (std::size_t i = 0; i < kRefinerDepth; ++i) {
      const std::string p = "dec" + std::to_string(i) + "_";
      f(p + "w", s.dec_w[i]);
      f(p + "gain", s.dec_gain[i]);
      f(p + "bias", s.dec_bias[i]);
    }
    f("out_w", s.out_w);
  }
};

using RefinerParams = BasicRefiner<Tensor>;
using RefinerVars = BasicRefiner<Var>;

inline Tensor gaussian_tensor(Shape shape, double stddev, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

/// Linear weights ~ N(0, 1/C); LayerNorm gain 1, bias 0. The log-variance
/// and output heads start at zero, so a fresh refiner with zero noise is the
/// identity map.
inline RefinerParams init_refiner(std::size_t c, SplitMix64& rng) {
  RefinerParams p;
  const double sd = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t i = 0; i < kRefinerDepth; ++i) {
    p.enc_w[i] = gaussian_tensor({c, c}, sd, rng);
    p.enc_gain[i] = Tensor({c}, 1.0);
    p.enc_bias[i] = Tensor({c}, 0.0);
    p.dec_w[i] = gaussian_tensor({c, c}, sd, rng);
    p.dec_gain[i] = Tensor({c}, 1.0);
    p.dec_bias[i] = Tensor({c}, 0.0);
  }
  p.mu_w = gaussian_tensor({c, c}, sd, rng);
  p.logvar_w = Tensor({c, c}, 0.0);
  p.out_w = Tensor({c, c}, 0.0);
  return p;
}

struct RefineOutput {
  Var refined;  // same shape as the source
  Var mu;
  Var logvar;
};

/// Reparameterized pass z = mu + exp(logvar / 2) * noise. `noise` supplies at
/// least as many rows as `source`; the leading rows are used.
inline RefineOutput refine(Tape& tape, const RefinerVars& p, Var source, const Tensor& noise) {
  const Tensor& src = source.value();
  const std::size_t c = p.mu_w.value().dim(0);
  if (src.rank() != 2 || src.cols() != c)
    throw ContractError("refiner of width " + std::to_string(c) + " given " + shape_str(src.shape()));
  if (noise.rank() != 2 || noise.cols() != c || noise.rows() < src.rows())
    throw ContractError("noise " + shape_str(noise.shape()) + " for source " + shape_str(src.shape()));

  Var h = source;
  for (std::size_t i = 0; i < kRefinerDepth; ++i)
    h = relu(layernorm(matmul(h, p.enc_w[i]), p.enc_gain[i], p.enc_bias[i]));
  Var mu = matmul(h, p.mu_w);
  Var logvar = matmul(h, p.logvar_w);

  Tensor eps({src.rows(), c});
  std::copy_n(noise.data().begin(), eps.size(), eps.data().begin());
  Var z = add(mu, mul(exp(scale(logvar, 0.5)), tape.constant(std::move(eps))));

  Var d = z;
  for (std::size_t i = 0; i < kRefinerDepth; ++i)
    d = relu(layernorm(matmul(d, p.dec_w[i]), p.dec_gain[i], p.dec_bias[i]));
  return {add(source, matmul(d, p.out_w)), mu, logvar};
}

// ---------------------------------------------------------------------------
// Alignment loss

struct AlignmentWeights {
  double mse = 1.0;
  double mmd = 1.0;
  double kl = 0.01;  // beta on KL(q(z) || N(0, I)); 0 disables
};

struct AlignmentResult {
  Var loss;
  bool no_pairs = false;  // nothing to align; loss is a zero constant
  std::size_t pairs = 0;
};

namespace detail {

inline Var refinement_loss(Var target, Var refined, const AlignmentWeights& w) {
  Tape& tape = tape_of(target);
  Var out = tape.constant(Tensor::scalar(0.0));
  if (w.mse != 0.0) {
    Var diff = sub(target, refined);
    out = add(out, scale(mean(mul(diff, diff)), w.mse));
  }
  if (w.mmd != 0.0) out = add(out, scale(mmd2(target, refined), w.mmd));
  return out;
}

/// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)).
inline Var kl_term(const RefineOutput& r) {
  const double rows = static_cast<double>(r.mu.value().rows());
  Var t = sub(add(mul(r.mu, r.mu), exp(r.logvar)), r.logvar);
  return scale(sum(add_scalar(t, -1.0)), 0.5 / rows);
}

/// Rows of matched (non-None) queries in class order.
inline std::vector<std::size_t> matched_in_class_order(std::span<const int> classes) {
  std::vector<std::size_t> out;
  for (auto i : class_order(classes))
    if (classes[i] != kNoneClass) out.push_back(i);
  return out;
}

}  // namespace detail

/// L_a = L_r(Q_r, refine_xr(Q_x)) + L_r(Q_x, refine_rx(Q_r)) over the
/// positionally aligned matched queries of both modalities after class
/// reordering, with L_r = w.mse * MSE + w.mmd * MMD^2, plus w.kl times the
/// KL terms of both refiners.
inline AlignmentResult alignment_loss(Tape& tape, Var q_r, Var q_x, std::span<const int> classes_r,
                                      std::span<const int> classes_x, const RefinerVars& refiner_rx,
                                      const RefinerVars& refiner_xr, const Tensor& noise_r, const Tensor& noise_x,
                                      const AlignmentWeights& w) {
  if (classes_r.size() != q_r.value().rows() || classes_x.size() != q_x.value().rows())
    throw ContractError("one class per query required");
  const auto idx_r = detail::matched_in_class_order(classes_r);
  const auto idx_x = detail::matched_in_class_order(classes_x);
  bool aligned = idx_r.size() == idx_x.size();
  for (std::size_t i = 0; aligned && i < idx_r.size(); ++i) aligned = classes_r[idx_r[i]] == classes_x[idx_x[i]];
  if (!aligned) throw ContractError("matched classes of the two modalities do not align after reordering");

  AlignmentResult out;
  out.pairs = idx_r.size();
  if (idx_r.empty() || (w.mse == 0.0 && w.mmd == 0.0 && w.kl == 0.0)) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    out.no_pairs = idx_r.empty();
    return out;
  }
  Var a_r = select_rows(q_r, idx_r);
  Var a_x = select_rows(q_x, idx_x);
  const RefineOutput ref_x = refine(tape, refiner_xr, a_x, noise_x);
  const RefineOutput ref_r = refine(tape, refiner_rx, a_r, noise_r);
  Var loss = add(detail::refinement_loss(a_r, ref_x.refined, w), detail::refinement_loss(a_x, ref_r.refined, w));
  if (w.kl != 0.0) loss = add(loss, scale(add(detail::kl_term(ref_x), detail::kl_term(ref_r)), w.kl));
  out.loss = loss;
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

namespace detail {

inline Tensor matched_rows(const QuerySet& qs) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < qs.assigned_class.size(); ++i)
    if (qs.assigned_class[i] != kNoneClass) idx.push_back(i);
  if (idx.empty()) throw ContractError(std::string("no matched queries in modality ") + modality_tag(qs.modality));
  return select_rows(qs.queries, idx);
}

}  // namespace detail

/// Squared MMD between the matched queries of the two modalities.
inline double modality_distance(const QuerySet& q_r, const QuerySet& q_x) {
  return mmd(detail::matched_rows(q_r), detail::matched_rows(q_x));
}

/// For every class matched in both modalities: mean per-coordinate absolute
/// deviation of its queries (from both modalities) from their joint center,
/// averaged over classes.
inline double class_distance(const QuerySet& q_r, const QuerySet& q_x) {
  if (q_r.queries.cols() != q_x.queries.cols()) throw DimensionError("query widths differ");
  const std::size_t c = q_r.queries.cols();
  std::map<int, std::vector<std::span<const double>>> members_r, members_x;
  for (std::size_t i = 0; i < q_r.assigned_class.size(); ++i)
    if (q_r.assigned_class[i] != kNoneClass) members_r[q_r.assigned_class[i]].push_back(q_r.queries.row(i));
  for (std::size_t i = 0; i < q_x.assigned_class.size(); ++i)
    if (q_x.assigned_class[i] != kNoneClass) members_x[q_x.assigned_class[i]].push_back(q_x.queries.row(i));

  double total = 0.0;
  std::size_t classes = 0;
  for (const auto& [cls, rows_r] : members_r) {
    auto it = members_x.find(cls);
    if (it == members_x.end()) continue;
    std::vector<std::span<const double>> rows = rows_r;
    rows.insert(rows.end(), it->second.begin(), it->second.end());
    std::vector<double> center(c, 0.0);
    for (auto r : rows)
      for (std::size_t j = 0; j < c; ++j) center[j] += r[j];
    for (double& v : center) v /= static_cast<double>(rows.size());
    double dev = 0.0;
    for (auto r : rows)
      for (std::size_t j = 0; j < c; ++j) dev += std::abs(r[j] - center[j]);
    total += dev / static_cast<double>(rows.size() * c);
    ++classes;
  }
  if (classes == 0) throw ContractError("no class is matched in both modalities");
  return total / static_cast<double>(classes);
}

}  // namespace bixformer
