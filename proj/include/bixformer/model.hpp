#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/cma.hpp"
#include "bixformer/error.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/params.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/umm.hpp"

namespace bixformer {

struct ModelDims {
  std::size_t queries = 8;   // L, per modality
  std::size_t width = 16;    // C
  std::size_t channels = 8;  // C_f
  int classes = 6;           // K
};

/// Learnable queries per modality and the decoder shared by both: one
/// single-head cross-attention layer (f_q, f_k, f_v), a classifier over K+1
/// classes and a mask-feature projection. Biases are [1 x n] rows.
template <class T>
struct BasicModel {
  T queries_r, queries_x;    // L x C
  T proj_q;                  // C x C
  T proj_k, proj_k_b;        // C_f x C, 1 x C
  T proj_v, proj_v_b;        // C_f x C, 1 x C
  T classifier, classifier_b;  // C x (K+1), 1 x (K+1)
  T mask_proj, mask_proj_b;  // C_f x C, 1 x C

  template <class F>
  void visit(F&& f) { visit_fields(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_fields(*this, f); }

 private:
  template <class Self, class F>
  static void visit_fields(Self& s, F& f) {
    f("queries_r", s.queries_r);
    f("queries_x", s.queries_x);
    f("proj_q", s.proj_q);
    f("proj_k", s.proj_k);
    f("proj_k_b", s.proj_k_b);
    f("proj_v", s.proj_v);
    f("proj_v_b", s.proj_v_b);
    f("classifier", s.classifier);
    f("classifier_b", s.classifier_b);
    f("mask_proj", s.mask_proj);
    f("mask_proj_b", s.mask_proj_b);
  }
};

using ModelParams = BasicModel<Tensor>;
using ModelVars = BasicModel<Var>;

inline ModelDims dims_of(const ModelParams& p) {
  return {p.queries_r.dim(0), p.queries_r.dim(1), p.proj_k.dim(0), static_cast<int>(p.classifier.dim(1)) - 1};
}

/// Queries ~ N(0, 1); weights ~ N(0, 1/fan_in); biases zero.
inline ModelParams init_model(const ModelDims& d, SplitMix64& rng) {
  const auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  const std::size_t k1 = static_cast<std::size_t>(d.classes) + 1;
  ModelParams p;
  p.queries_r = gaussian_tensor({d.queries, d.width}, 1.0, rng);
  p.queries_x = gaussian_tensor({d.queries, d.width}, 1.0, rng);
  p.proj_q = gaussian_tensor({d.width, d.width}, sd(d.width), rng);
  p.proj_k = gaussian_tensor({d.channels, d.width}, sd(d.channels), rng);
  p.proj_k_b = Tensor({1, d.width}, 0.0);
  p.proj_v = gaussian_tensor({d.channels, d.width}, sd(d.channels), rng);
  p.proj_v_b = Tensor({1, d.width}, 0.0);
  p.classifier = gaussian_tensor({d.width, k1}, sd(d.width), rng);
  p.classifier_b = Tensor({1, k1}, 0.0);
  p.mask_proj = gaussian_tensor({d.channels, d.width}, sd(d.channels), rng);
  p.mask_proj_b = Tensor({1, d.width}, 0.0);
  return p;
}

/// Per-modality graph outputs of one forward pass.
struct ModalityOutput {
  Var queries;    // refined queries, L x C
  Var attention;  // L x HW, rows sum to 1
  QueryLogits logits;
};

struct ForwardOutput {
  ModalityOutput r;
  ModalityOutput x;
};

namespace detail {

/// C_f x H x W features as HW x C_f pixel rows.
inline Tensor pixel_rows(const Tensor& feat) {
  const std::size_t cf = feat.dim(0), hw = feat.dim(1) * feat.dim(2);
  Tensor out({hw, cf});
  for (std::size_t c = 0; c < cf; ++c)
    for (std::size_t p = 0; p < hw; ++p) out.at(p, c) = feat[c * hw + p];
  return out;
}

/// x W + 1 b, the bias broadcast through a ones column.
inline Var affine(Tape& tape, Var x, Var w, Var b) {
  return add(matmul(x, w), matmul(tape.constant(Tensor({x.value().rows(), 1}, 1.0)), b));
}

inline ModalityOutput forward_modality(Tape& tape, const ModelVars& p, Var queries, const Tensor& feat) {
  const double c = static_cast<double>(p.proj_q.value().dim(1));
  Var pixels = tape.constant(pixel_rows(feat));
  Var q = matmul(queries, p.proj_q);
  Var k = affine(tape, pixels, p.proj_k, p.proj_k_b);
  Var v = affine(tape, pixels, p.proj_v, p.proj_v_b);
  Var attention = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(c)));
  Var refined = matmul(attention, v);
  Var class_logits = affine(tape, refined, p.classifier, p.classifier_b);
  Var mask_features = affine(tape, pixels, p.mask_proj, p.mask_proj_b);
  Var mask_logits = matmul(refined, transpose(mask_features));
  return {refined, attention, {class_logits, mask_logits}};
}

}  // namespace detail

/// Modality-specific cross-attention of each query set over its own
/// modality's pixels, then class logits and mask logits (inner products of
/// queries with projected pixel features).
inline ForwardOutput forward(Tape& tape, const ModelVars& p, const Scene& scene) {
  const Tensor& qr = p.queries_r.value();
  const std::size_t cf = p.proj_k.value().dim(0);
  for (const Tensor* f : {&scene.feat_r, &scene.feat_x})
    if (f->rank() != 3 || f->dim(0) != cf || f->dim(1) != scene.gt.height() || f->dim(2) != scene.gt.width())
      throw ContractError("scene features " + shape_str(f->shape()) + " do not fit the model (C_f=" +
                          std::to_string(cf) + ")");
  if (p.queries_x.value().shape() != qr.shape()) throw ContractError("query sets differ in shape");
  if (p.classifier.value().dim(1) != static_cast<std::size_t>(scene.gt.num_classes()) + 1)
    throw ContractError("classifier width does not match K of the scene");
  return {detail::forward_modality(tape, p, p.queries_r, scene.feat_r),
          detail::forward_modality(tape, p, p.queries_x, scene.feat_x)};
}

/// Probabilities and masks from head logits.
inline PredictionSet to_prediction(const ModalityOutput& out, Modality modality, std::size_t h, std::size_t w) {
  const Tensor& cl = out.logits.class_logits.value();
  const Tensor& ml = out.logits.mask_logits.value();
  PredictionSet p{modality, Tensor(cl.shape()), Tensor({ml.rows(), h, w})};
  for (std::size_t i = 0; i < cl.rows(); ++i) {
    auto in = cl.row(i);
    auto o = p.class_scores.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) s += (o[j] = std::exp(in[j] - mx));
    for (double& v : o) v /= s;
  }
  for (std::size_t i = 0; i < ml.size(); ++i) p.masks[i] = detail::sigmoid(ml[i]);
  return p;
}

struct Predictions {
  PredictionSet r;
  PredictionSet x;
  QuerySet queries_r;  // classes left at None; filled in after matching
  QuerySet queries_x;
};

/// Forward pass without gradients.
inline Predictions predict(const ModelParams& params, const Scene& scene) {
  Tape tape;
  const ModelVars vars = bind(tape, params, false);
  const ForwardOutput out = forward(tape, vars, scene);
  const std::size_t h = scene.gt.height(), w = scene.gt.width(), l = params.queries_r.dim(0);
  return {to_prediction(out.r, Modality::kRgb, h, w), to_prediction(out.x, Modality::kX, h, w),
          {out.r.queries.value(), std::vector<int>(l, kNoneClass), Modality::kRgb},
          {out.x.queries.value(), std::vector<int>(l, kNoneClass), Modality::kX}};
}

/// Semantic map from all queries of the given prediction sets: per pixel,
/// score(c) = sum_i p_i(c) * m_i(pixel) over real classes c = 1..K; the
/// argmax wins and ties go to the smaller class id.
inline Tensor fuse_and_segment(std::span<const PredictionSet* const> preds) {
  if (preds.empty()) throw ContractError("nothing to fuse");
  const Tensor& m0 = preds[0]->masks;
  const std::size_t h = m0.dim(1), w = m0.dim(2), hw = h * w;
  const int k = preds[0]->num_classes();
  for (const PredictionSet* p : preds)
    if (p->num_classes() != k || p->masks.dim(1) != h || p->masks.dim(2) != w)
      throw DimensionError("prediction sets to fuse disagree in shape");

  std::vector<double> score(static_cast<std::size_t>(k + 1) * hw, 0.0);
  for (const PredictionSet* p : preds)
    for (std::size_t i = 0; i < p->num_queries(); ++i) {
      auto probs = p->class_scores.row(i);
      auto mask = p->masks.row(i);
      for (int c = 1; c <= k; ++c) {
        const double pc = probs[static_cast<std::size_t>(c)];
        double* s = &score[static_cast<std::size_t>(c) * hw];
        for (std::size_t px = 0; px < hw; ++px) s[px] += pc * mask[px];
      }
    }
  Tensor out({h, w});
  for (std::size_t px = 0; px < hw; ++px) {
    int best = 1;
    for (int c = 2; c <= k; ++c)
      if (score[static_cast<std::size_t>(c) * hw + px] > score[static_cast<std::size_t>(best) * hw + px]) best = c;
    out[px] = best;
  }
  return out;
}

inline Tensor fuse_and_segment(const PredictionSet& r, const PredictionSet& x) {
  const PredictionSet* both[] = {&r, &x};
  return fuse_and_segment(both);
}

}  // namespace bixformer
