#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "bixformer/eval.hpp"
#include "bixformer/model.hpp"
#include "bixformer/synth.hpp"
#include "bixformer/verify.hpp"

using namespace bixformer;

namespace {

// Per-pixel argmax over real classes of sum_i p_i(c) m_i(pixel), ties to the
// smaller class.
Tensor fuse_oracle(const std::vector<const PredictionSet*>& preds, std::size_t h, std::size_t w, int k) {
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      int best = 1;
      double best_score = -1.0;
      for (int c = 1; c <= k; ++c) {
        double s = 0.0;
        for (const PredictionSet* p : preds)
          for (std::size_t i = 0; i < p->num_queries(); ++i)
            s += p->class_scores.at(i, static_cast<std::size_t>(c)) * p->masks.at(i, y, x);
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      out.at(y, x) = best;
    }
  return out;
}

// Straight counting IoU over classes that occur in either map.
double counting_miou(const Tensor& pred, const std::vector<int>& truth, int k) {
  double total = 0.0;
  int classes = 0;
  for (int c = 1; c <= k; ++c) {
    int inter = 0, uni = 0;
    for (std::size_t p = 0; p < truth.size(); ++p) {
      if (truth[p] == 0) continue;
      const bool a = static_cast<int>(pred[p]) == c, b = truth[p] == c;
      inter += a && b;
      uni += a || b;
    }
    if (uni == 0) continue;
    total += static_cast<double>(inter) / uni;
    ++classes;
  }
  return classes ? total / classes : 0.0;
}

ModelParams small_model(std::uint64_t seed, ModelDims d = {4, 6, 8, 6}) {
  SplitMix64 rng(seed);
  return init_model(d, rng);
}

}  // namespace

TEST(Model, AttentionRowsAndConvexEnvelope) {
  const ModelParams params = small_model(1);
  const Scene scene = generate_scene(SynthConfig{}, 0);
  Tape tape;
  const ModelVars vars = bind(tape, params, false);
  const ForwardOutput out = forward(tape, vars, scene);
  for (const ModalityOutput* m : {&out.r, &out.x}) {
    const Tensor& att = m->attention.value();
    for (std::size_t i = 0; i < att.rows(); ++i) {
      double s = 0.0;
      for (double v : att.row(i)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  // Refined queries are convex combinations of the value rows.
  Tape t2;
  const ModelVars v2 = bind(t2, params, false);
  const Var pixels = t2.constant(detail::pixel_rows(scene.feat_r));
  const Tensor values = detail::affine(t2, pixels, v2.proj_v, v2.proj_v_b).value();
  const Tensor& q = out.r.queries.value();
  for (std::size_t j = 0; j < q.cols(); ++j) {
    double lo = values.at(0, j), hi = lo;
    for (std::size_t p = 0; p < values.rows(); ++p) {
      lo = std::min(lo, values.at(p, j));
      hi = std::max(hi, values.at(p, j));
    }
    for (std::size_t i = 0; i < q.rows(); ++i) {
      EXPECT_GE(q.at(i, j), lo - 1e-12);
      EXPECT_LE(q.at(i, j), hi + 1e-12);
    }
  }
}

TEST(Model, ZeroModalityIsDeterministic) {
  const ModelParams params = small_model(2);
  const Scene a = generate_scene(SynthConfig{}, 1).with_presence(true, false);
  const Scene b = generate_scene(SynthConfig{}, 2).with_presence(true, false);
  const Predictions pa = predict(params, a), pb = predict(params, b);
  EXPECT_EQ(pa.x.class_scores, pb.x.class_scores);
  EXPECT_EQ(pa.x.masks, pb.x.masks);
  // With zero input every key is the bias row, so attention is uniform.
  Tape tape;
  const ForwardOutput out = forward(tape, bind(tape, params, false), a);
  const Tensor& att = out.x.attention.value();
  for (double v : att.data()) EXPECT_NEAR(v, 1.0 / static_cast<double>(att.cols()), 1e-15);
}

TEST(Model, ForwardRejectsMismatchedScene) {
  const ModelParams params = small_model(3, {4, 6, 5, 6});
  const Scene scene = generate_scene(SynthConfig{}, 0);
  EXPECT_THROW(predict(params, scene), ContractError);
}

TEST(Model, PredictionsAreValid) {
  const ModelParams params = small_model(4);
  const Predictions p = predict(params, generate_scene(SynthConfig{}, 3));
  EXPECT_NO_THROW(p.r.validate());
  EXPECT_NO_THROW(p.x.validate());
}

TEST(Fuse, SingleQueryOneHot) {
  PredictionSet p{Modality::kRgb, Tensor::matrix({{0, 0, 1, 0}}),
                  Tensor({1, 2, 2}, std::vector<double>{1, 0, 0, 1})};
  const PredictionSet* one[] = {&p};
  EXPECT_EQ(fuse_and_segment(one).values(), (std::vector<double>{2, 1, 1, 2}));
  PredictionSet dup{Modality::kRgb, Tensor::matrix({{0, 0, 1, 0}, {0, 0, 1, 0}}),
                    Tensor({2, 2, 2}, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1})};
  const PredictionSet* two[] = {&dup};
  EXPECT_EQ(fuse_and_segment(two), fuse_and_segment(one));
}

TEST(Fuse, MatchesPixelOracle) {
  SplitMix64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto l = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const int k = static_cast<int>(rng.uniform_int(1, 5));
    const PredictionSet pr = random_prediction(Modality::kRgb, l, k, h, w, rng);
    const PredictionSet px = random_prediction(Modality::kX, l, k, h, w, rng);
    EXPECT_EQ(fuse_and_segment(pr, px), fuse_oracle({&pr, &px}, h, w, k));
  }
}

TEST(Eval, ExactPredictionScoresOne) {
  const Scene s = generate_scene(SynthConfig{}, 7);
  const auto truth = render_gt(s.gt);
  Tensor pred({s.gt.height(), s.gt.width()}, 1.0);
  for (std::size_t p = 0; p < truth.size(); ++p)
    if (truth[p]) pred[p] = truth[p];
  const EvalReport r = miou(pred, s.gt);
  EXPECT_EQ(r.mean_iou, 1.0);
  EXPECT_EQ(r.per_class_iou.size(), s.gt.size());
}

TEST(Eval, DisjointClassScoresZero) {
  const GroundTruthSet gt(1, 4, 3, {{1, Tensor({1, 4}, std::vector<double>{1, 1, 0, 0})},
                                   {2, Tensor({1, 4}, std::vector<double>{0, 0, 1, 1})}});
  const Tensor pred({1, 4}, std::vector<double>{2, 2, 1, 1});
  const EvalReport r = miou(pred, gt);
  EXPECT_EQ(r.per_class_iou.at(1), 0.0);
  EXPECT_EQ(r.per_class_iou.at(2), 0.0);
  EXPECT_THROW(miou(Tensor({1, 4}, 0.0), gt), ContractError);
  EXPECT_THROW(miou(Tensor({2, 2}, 1.0), gt), DimensionError);
}

TEST(Eval, MatchesCountingOracleAndIsSymmetric) {
  SplitMix64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const int k = 4;
    // Full-coverage ground truth so both maps are hard labelings of every pixel.
    std::vector<double> a(64), b(64);
    for (double& v : a) v = static_cast<double>(rng.uniform_int(1, k));
    for (double& v : b) v = static_cast<double>(rng.uniform_int(1, k));
    auto as_gt = [&](const std::vector<double>& m) {
      std::vector<GroundTruthItem> items;
      for (int c = 1; c <= k; ++c) {
        Tensor mask({8, 8}, 0.0);
        bool any = false;
        for (std::size_t p = 0; p < 64; ++p)
          if (m[p] == c) {
            mask[p] = 1.0;
            any = true;
          }
        if (any) items.push_back({c, std::move(mask)});
      }
      return GroundTruthSet(8, 8, k, std::move(items));
    };
    const GroundTruthSet gb = as_gt(b), ga = as_gt(a);
    const Tensor ta({8, 8}, a), tb({8, 8}, b);
    const double m1 = miou(ta, gb).mean_iou;
    EXPECT_NEAR(m1, counting_miou(ta, render_gt(gb), k), 1e-15);
    EXPECT_NEAR(m1, miou(tb, ga).mean_iou, 1e-15);
  }
}

TEST(Eval, SubsetEvalMeanRowAndOrder) {
  const ModelParams params = small_model(8);
  SynthConfig cfg;
  const Benchmark b = generate_benchmark(cfg, 0, 4);
  const SubsetEvaluation e = subset_eval(params, b.test, {"rx", "r", "x"});
  ASSERT_EQ(e.reports.size(), 3u);
  EXPECT_EQ(e.reports[0].subset, "rx");
  EXPECT_EQ(e.mean.subset, "Mean");
  EXPECT_NEAR(e.mean.mean_iou, (e.reports[0].mean_iou + e.reports[1].mean_iou + e.reports[2].mean_iou) / 3.0, 1e-15);
  EXPECT_THROW(subset_eval(params, b.test, {"rgb"}), ConfigError);

  // With both modalities present zero-fill changes nothing.
  IouAccumulator acc(cfg.k);
  for (const Scene& s : b.test) {
    const Predictions p = predict(params, s);
    acc.add(fuse_and_segment(p.r, p.x), s.gt);
  }
  EXPECT_EQ(acc.report().mean_iou, e.reports[0].mean_iou);

  const SubsetEvaluation per = subset_eval(params, b.test, {"rx"}, IouAveraging::kPerImage);
  EXPECT_GE(per.reports[0].mean_iou, 0.0);
  EXPECT_LE(per.reports[0].mean_iou, 1.0);
}

TEST(Eval, OutputFormats) {
  SubsetEvaluation e;
  e.reports.push_back({"r", {{1, 0.5}, {3, 0.25}}, 0.375});
  e.mean = {"Mean", {}, 0.375};
  EXPECT_EQ(evaluation_to_json(e).dump(),
            R"({"reports":[{"subset":"r","per_class_iou":{"1":0.5,"3":0.25},"mean_iou":0.375}],"mean":0.375})");
  const std::string table = evaluation_table(e, 3);
  EXPECT_NE(table.find("   50.00       -   25.00   37.50"), std::string::npos) << table;

  std::map<int, ModalityShare> dist{{1, {0.25, 0.75, 4}}};
  EXPECT_EQ(distribution_csv(dist), "class,frac_rgb,frac_x\n1,0.250000,0.750000\n");
}

TEST(Eval, LabelDistributionCountsOnlyMam) {
  const GroundTruthSet gt(1, 2, 2, {{1, Tensor({1, 2}, std::vector<double>{1, 0})},
                                   {2, Tensor({1, 2}, std::vector<double>{0, 1})}});
  Matching m = Matching::unmatched(2);
  m.pairs[0].label = 0;
  m.pairs[0].source = MatchSource::kMam;
  m.pairs[3].label = 1;
  m.pairs[3].source = MatchSource::kMam;
  m.pairs[2].label = 0;
  m.pairs[2].source = MatchSource::kCm;
  m.pairs[1].label = 1;
  m.pairs[1].source = MatchSource::kCm;
  const auto d = label_distribution({m, m}, {&gt, &gt});
  EXPECT_EQ(d.at(1).rgb, 1.0);
  EXPECT_EQ(d.at(1).count, 2u);
  EXPECT_EQ(d.at(2).x, 1.0);
  for (const auto& [c, s] : d) EXPECT_DOUBLE_EQ(s.rgb + s.x, 1.0);
}
