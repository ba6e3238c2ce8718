#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/cma.hpp"
#include "bixformer/gradcheck.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/umm.hpp"
#include "bixformer/verify.hpp"

using namespace bixformer;

namespace {

GroundTruthSet one_label(int cls, std::vector<double> mask, std::size_t h, std::size_t w, int k) {
  return GroundTruthSet(h, w, k, {{cls, Tensor({h, w}, std::move(mask))}});
}

PredictionSet uniform_prediction(Modality m, std::size_t l, int k, std::size_t h, std::size_t w, double mask) {
  const auto k1 = static_cast<std::size_t>(k) + 1;
  return {m, Tensor({l, k1}, 1.0 / static_cast<double>(k1)), Tensor({l, h, w}, mask)};
}

// Exhaustive minimum over injective maps of `labels` columns into `rows`.
double exhaustive(const CostMatrix& c) {
  std::vector<std::size_t> rows(c.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t k = 0; k < c.cols(); ++k) s += c(rows[k], k);
    best = std::min(best, s);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cost components

TEST(MatchingCosts, ClassCost) {
  EXPECT_EQ(class_cost(std::vector<double>{0, 0, 1, 0}, 2), -1.0);
  EXPECT_DOUBLE_EQ(class_cost(std::vector<double>(5, 0.2), 3), -0.2);
  EXPECT_DOUBLE_EQ(class_cost(std::vector<double>{0.1, 0.6, 0.3}, 2), -0.3);
  EXPECT_THROW(class_cost(std::vector<double>{0.5, 0.5}, 0), ContractError);
}

TEST(MatchingCosts, DiceCost) {
  const std::vector<double> g{1, 1, 0, 1};
  EXPECT_DOUBLE_EQ(dice_cost(g, g), 0.0);
  EXPECT_DOUBLE_EQ(dice_cost(std::vector<double>(4, 0.0), g), 1.0 - 1.0 / 4.0);
  EXPECT_DOUBLE_EQ(dice_cost(std::vector<double>{0, 0, 1, 0}, g), 1.0 - 1.0 / 5.0);
  EXPECT_THROW(dice_cost(std::vector<double>(3, 0.0), g), DimensionError);
}

TEST(MatchingCosts, BceCost) {
  const std::vector<double> g{1, 0, 1, 0};
  EXPECT_LT(bce_cost(g, g), 1e-6);
  EXPECT_NEAR(bce_cost(std::vector<double>(4, 0.5), g), std::log(2.0), 1e-15);
  const double want = -(2 * std::log(0.9) + 2 * std::log(0.8)) / 4.0;
  EXPECT_NEAR(bce_cost(std::vector<double>{0.9, 0.1, 0.8, 0.2}, std::vector<double>{1, 0, 1, 0}), want, 1e-15);
}

TEST(MatchingCosts, DiceSymmetricOnBinary) {
  SplitMix64 rng(21);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(9), b(9);
    for (double& v : a) v = rng.uniform() < 0.5;
    for (double& v : b) v = rng.uniform() < 0.5;
    EXPECT_DOUBLE_EQ(dice_cost(a, b), dice_cost(b, a));
  }
}

TEST(MatchingCosts, MatrixEntriesAreComponentSums) {
  const GroundTruthSet gt = one_label(1, {1, 0, 1, 0}, 2, 2, 2);
  PredictionSet p{Modality::kRgb, Tensor::matrix({{0.2, 0.5, 0.3}}), Tensor({1, 2, 2}, std::vector<double>{0.9, 0.1, 0.8, 0.2})};
  const CostMatrix c = build_cost_matrix(p, gt, CostWeights{});
  const std::vector<double> m{0.9, 0.1, 0.8, 0.2}, g{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(c(0, 0), -0.5 + dice_cost(m, g) + bce_cost(m, g));
  const CostMatrix z = build_cost_matrix(p, gt, CostWeights{0, 0, 0});
  EXPECT_EQ(z(0, 0), 0.0);
}

TEST(MatchingCosts, RowOrderAndKMismatch) {
  SplitMix64 rng(22);
  const PredictionSet pr = random_prediction(Modality::kRgb, 2, 3, 2, 2, rng);
  const PredictionSet px = random_prediction(Modality::kX, 2, 3, 2, 2, rng);
  const GroundTruthSet gt = random_ground_truth(3, 3, 2, 2, rng);
  const CostMatrix both = build_cost_matrix(pr, px, gt, CostWeights{});
  const CostMatrix r = build_cost_matrix(pr, gt, CostWeights{});
  const CostMatrix x = build_cost_matrix(px, gt, CostWeights{});
  ASSERT_EQ(both.rows(), 4u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(both(1, k), r(1, k));
    EXPECT_EQ(both(3, k), x(1, k));
  }
  const PredictionSet wrong = random_prediction(Modality::kX, 2, 4, 2, 2, rng);
  EXPECT_THROW(build_cost_matrix(pr, wrong, gt, CostWeights{}), ContractError);
}

TEST(MatchingCosts, PermutationEquivariance) {
  SplitMix64 rng(23);
  const PredictionSet p = random_prediction(Modality::kRgb, 3, 4, 3, 3, rng);
  const GroundTruthSet gt = random_ground_truth(3, 4, 3, 3, rng);
  const CostMatrix c = build_cost_matrix(p, gt, CostWeights{});

  std::vector<GroundTruthItem> rev(gt.items().rbegin(), gt.items().rend());
  const GroundTruthSet gt_rev(3, 3, 4, rev);
  const CostMatrix cl = build_cost_matrix(p, gt_rev, CostWeights{});

  PredictionSet q = p;
  const std::size_t perm[] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i) {
    std::copy(p.class_scores.row(perm[i]).begin(), p.class_scores.row(perm[i]).end(), q.class_scores.row(i).begin());
    std::copy(p.masks.row(perm[i]).begin(), p.masks.row(perm[i]).end(), q.masks.row(i).begin());
  }
  const CostMatrix cq = build_cost_matrix(q, gt, CostWeights{});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(cl(i, k), c(i, 2 - k));
      EXPECT_EQ(cq(i, k), c(perm[i], k));
    }
}

TEST(GroundTruth, Validation) {
  EXPECT_THROW(GroundTruthSet(2, 2, 2, {{3, Tensor({2, 2}, 1.0)}}), ContractError);
  EXPECT_THROW(GroundTruthSet(2, 2, 2, {{1, Tensor({2, 2}, 1.0)}, {1, Tensor({2, 2}, 1.0)}}), ContractError);
  EXPECT_THROW(GroundTruthSet(2, 2, 2, {{1, Tensor({2, 2}, 0.5)}}), ContractError);
  EXPECT_THROW(GroundTruthSet(2, 2, 2, {{1, Tensor({3, 2}, 1.0)}}), DimensionError);
}

// ---------------------------------------------------------------------------
// Pipeline steps

TEST(Umm, EmptyGroundTruthLeavesEverythingNone) {
  SplitMix64 rng(31);
  const PredictionSet pr = random_prediction(Modality::kRgb, 3, 4, 2, 2, rng);
  const PredictionSet px = random_prediction(Modality::kX, 3, 4, 2, 2, rng);
  const GroundTruthSet gt(2, 2, 4);
  const UmmResult u = umm_full(pr, px, gt, CostWeights{});
  ASSERT_EQ(u.final_matching.size(), 6u);
  for (const MatchPair& p : u.final_matching.pairs) {
    EXPECT_FALSE(p.label);
    EXPECT_EQ(p.source, MatchSource::kNone);
  }
}

TEST(Umm, RiggedCostsPutBothLabelsOnRgb) {
  // Two labels; RGB queries predict them perfectly, X queries are uninformative.
  const std::size_t h = 2, w = 2;
  std::vector<GroundTruthItem> items{{1, Tensor({h, w}, std::vector<double>{1, 1, 0, 0})},
                                     {2, Tensor({h, w}, std::vector<double>{0, 0, 1, 1})}};
  const GroundTruthSet gt(h, w, 2, items);
  PredictionSet pr{Modality::kRgb, Tensor::matrix({{0, 1, 0}, {0, 0, 1}}),
                   Tensor({2, h, w}, std::vector<double>{1, 1, 0, 0, 0, 0, 1, 1})};
  const PredictionSet px = uniform_prediction(Modality::kX, 2, 2, h, w, 0.5);

  const CostMatrix c = build_cost_matrix(pr, px, gt, CostWeights{});
  const MamResult m = mam(pr, px, gt, CostWeights{});
  EXPECT_DOUBLE_EQ(m.cost, exhaustive(c));
  EXPECT_EQ(m.matching[0].label, std::optional<std::size_t>(0));
  EXPECT_EQ(m.matching[1].label, std::optional<std::size_t>(1));
  EXPECT_FALSE(m.matching[2].label);
  EXPECT_FALSE(m.matching[3].label);

  const Residuals r = split_and_residuals(m.matching, gt);
  EXPECT_TRUE(r.unassigned_r.empty());
  EXPECT_EQ(r.unassigned_x, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.free_x, (std::vector<std::size_t>{2, 3}));

  const auto [fr, fx] = cm(pr, px, gt, r, CostWeights{});
  EXPECT_TRUE(fr.pairs.empty());
  EXPECT_EQ(fx.pairs.size(), 2u);

  const UmmResult u = umm_full(pr, px, gt, CostWeights{});
  for (std::size_t q : {0u, 1u}) EXPECT_EQ(u.final_matching[q].source, MatchSource::kMam);
  for (std::size_t q : {2u, 3u}) EXPECT_EQ(u.final_matching[q].source, MatchSource::kCm);
  ASSERT_EQ(u.diagnostics.mam_attribution.size(), 2u);
  EXPECT_EQ(u.diagnostics.mam_attribution[0].second, Modality::kRgb);
  EXPECT_EQ(u.diagnostics.mam_attribution[1].second, Modality::kRgb);
}

TEST(Umm, EvenSplitComplementIdentity) {
  const GroundTruthSet gt(1, 2, 2, {{1, Tensor({1, 2}, std::vector<double>{1, 0})},
                                   {2, Tensor({1, 2}, std::vector<double>{0, 1})}});
  Matching m = Matching::unmatched(2);
  m.pairs[0].label = 0;
  m.pairs[0].source = MatchSource::kMam;
  m.pairs[3].label = 1;
  m.pairs[3].source = MatchSource::kMam;
  const Residuals r = split_and_residuals(m, gt);
  EXPECT_EQ(r.unassigned_r.size(), r.assigned_x.size());
  EXPECT_EQ(r.unassigned_x.size(), r.assigned_r.size());
  EXPECT_EQ(r.free_r, (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.free_x, (std::vector<std::size_t>{2}));
}

TEST(Umm, MergeRules) {
  const GroundTruthSet gt(1, 2, 3, {{1, Tensor({1, 2}, std::vector<double>{1, 0})},
                                   {3, Tensor({1, 2}, std::vector<double>{0, 1})}});
  Matching m = Matching::unmatched(2);
  m.pairs[0].label = 1;
  m.pairs[0].source = MatchSource::kMam;
  Fragment fr{Modality::kRgb, {{0, 0}}, 0.0};  // overlaps a MAM query: cleared
  Fragment fx{Modality::kX, {{2, 0}}, 0.0};
  const Matching out = merge(m, fr, fx, gt);
  EXPECT_EQ(out[0].label, std::optional<std::size_t>(1));
  EXPECT_EQ(out[0].source, MatchSource::kMam);
  EXPECT_FALSE(out[1].label);
  EXPECT_EQ(out[2].label, std::optional<std::size_t>(0));
  EXPECT_EQ(out[2].source, MatchSource::kCm);
  EXPECT_EQ(out[3].source, MatchSource::kNone);

  Fragment bad{Modality::kRgb, {{2, 0}}, 0.0};
  EXPECT_THROW(merge(m, bad, Fragment{Modality::kX, {}, 0.0}, gt), MergeConflictError);
  Fragment twice{Modality::kX, {{3, 0}, {3, 1}}, 0.0};
  EXPECT_THROW(merge(m, Fragment{Modality::kRgb, {}, 0.0}, twice, gt), MergeConflictError);
}

TEST(Umm, InfeasibleWhenLabelsExceedQueries) {
  SplitMix64 rng(32);
  const PredictionSet pr = random_prediction(Modality::kRgb, 1, 4, 2, 2, rng);
  const PredictionSet px = random_prediction(Modality::kX, 1, 4, 2, 2, rng);
  const GroundTruthSet gt2 = random_ground_truth(2, 4, 2, 2, rng);
  EXPECT_THROW(umm_full(pr, px, gt2, CostWeights{}), InfeasibleError);
  EXPECT_NO_THROW(umm_full(pr, px, gt2, CostWeights{}, MatchingMode::kMamOnly));
  const GroundTruthSet gt3 = random_ground_truth(3, 4, 2, 2, rng);
  EXPECT_THROW(umm_full(pr, px, gt3, CostWeights{}, MatchingMode::kMamOnly), InfeasibleError);
}

// Coverage, uniqueness, conservatism and the counting identity over random
// instances with L >= U.
TEST(Umm, RandomSweepInvariants) {
  SplitMix64 rng(33);
  for (int t = 0; t < 1000; ++t) {
    const auto l = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const auto u = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(l)));
    const PredictionSet pr = random_prediction(Modality::kRgb, l, 5, 3, 3, rng);
    const PredictionSet px = random_prediction(Modality::kX, l, 5, 3, 3, rng);
    const GroundTruthSet gt = random_ground_truth(u, 5, 3, 3, rng);
    const UmmResult res = umm_full(pr, px, gt, CostWeights{});
    const Matching& f = res.final_matching;

    std::vector<int> in_r(u, 0), in_x(u, 0);
    std::size_t mam_count = 0, cm_count = 0;
    for (std::size_t q = 0; q < 2 * l; ++q) {
      if (res.mam_matching[q].label) {
        EXPECT_EQ(f[q].label, res.mam_matching[q].label);
        EXPECT_EQ(f[q].source, MatchSource::kMam);
      }
      if (!f[q].label) continue;
      (q < l ? in_r : in_x)[*f[q].label] += 1;
      (f[q].source == MatchSource::kMam ? mam_count : cm_count) += 1;
    }
    for (std::size_t k = 0; k < u; ++k) {
      EXPECT_EQ(in_r[k], 1);
      EXPECT_EQ(in_x[k], 1);
    }
    EXPECT_EQ(mam_count + cm_count, 2 * u);
    EXPECT_EQ(mam_count, u);
  }
}

TEST(Umm, MamOnlyIsThePlainMatcher) {
  SplitMix64 rng(34);
  for (int t = 0; t < 50; ++t) {
    const PredictionSet pr = random_prediction(Modality::kRgb, 3, 4, 2, 3, rng);
    const PredictionSet px = random_prediction(Modality::kX, 3, 4, 2, 3, rng);
    const GroundTruthSet gt = random_ground_truth(3, 4, 2, 3, rng);
    const UmmResult u = umm_full(pr, px, gt, CostWeights{}, MatchingMode::kMamOnly);
    EXPECT_EQ(u.final_matching, u.mam_matching);
    EXPECT_FALSE(u.diagnostics.cm_invoked);
    EXPECT_DOUBLE_EQ(u.diagnostics.mam_cost, exhaustive(build_cost_matrix(pr, px, gt, CostWeights{})));
  }
}

TEST(Umm, CmOnlyMatchesEachModalityIndependently) {
  SplitMix64 rng(35);
  const PredictionSet pr = random_prediction(Modality::kRgb, 4, 4, 2, 3, rng);
  const PredictionSet px = random_prediction(Modality::kX, 4, 4, 2, 3, rng);
  const GroundTruthSet gt = random_ground_truth(3, 4, 2, 3, rng);
  const UmmResult u = umm_full(pr, px, gt, CostWeights{}, MatchingMode::kCmOnly);
  EXPECT_DOUBLE_EQ(u.diagnostics.cm_cost_r, exhaustive(build_cost_matrix(pr, gt, CostWeights{})));
  EXPECT_DOUBLE_EQ(u.diagnostics.cm_cost_x, exhaustive(build_cost_matrix(px, gt, CostWeights{})));
  EXPECT_TRUE(u.diagnostics.mam_attribution.empty());
  for (const MatchPair& p : u.final_matching.pairs) EXPECT_NE(p.source, MatchSource::kMam);
}

TEST(Umm, SerializationOrder) {
  const GroundTruthSet gt(1, 1, 2, {{2, Tensor({1, 1}, 1.0)}});
  Matching m = Matching::unmatched(1);
  m.pairs[1].label = 0;
  m.pairs[1].source = MatchSource::kMam;
  EXPECT_EQ(matching_to_json(m, gt).dump(),
            R"([{"query":0,"modality":"r","class":null,"source":"none"},)"
            R"({"query":1,"modality":"x","class":2,"source":"mam"}])");
}

// ---------------------------------------------------------------------------
// Segmentation loss

TEST(SegLoss, AllNoneWithUniformScores) {
  const std::size_t l = 3, h = 2, w = 2;
  const int k = 4;
  Tape tape;
  const QueryLogits head{tape.leaf(Tensor({l, 5}, 0.0)), tape.leaf(Tensor({l, h * w}, -40.0))};
  const GroundTruthSet gt(h, w, k);
  const Var loss = seg_loss(tape, head, head, gt, Matching::unmatched(l), LossWeights{1, 1, 0, 0.1});
  EXPECT_NEAR(loss.value().item(), 2.0 * l * 0.1 * std::log(5.0), 1e-12);
}

TEST(SegLoss, PerfectFitIsNearZero) {
  const std::size_t h = 2, w = 2;
  const GroundTruthSet gt(h, w, 2, {{2, Tensor({h, w}, std::vector<double>{1, 0, 0, 1})}});
  Matching m = Matching::unmatched(1);
  m.pairs[0].label = 0;
  m.pairs[1].label = 0;
  Tape tape;
  const QueryLogits head{tape.leaf(Tensor::matrix({{-60, -60, 60}})),
                         tape.leaf(Tensor::matrix({{60, -60, -60, 60}}))};
  const LossWeights lw;
  const Var loss = seg_loss(tape, head, head, gt, m, lw);
  EXPECT_LT(loss.value().item(), 1e-6);
  EXPECT_THROW(seg_loss(tape, head, head, gt, Matching::unmatched(2), lw), ContractError);
}

TEST(SegLoss, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(36);
  const GroundTruthSet gt = random_ground_truth(2, 3, 2, 2, rng);
  Matching m = Matching::unmatched(2);
  m.pairs[0].label = 1;
  m.pairs[3].label = 0;
  m.pairs[1].label = 0;
  m.pairs[2].label = 1;
  std::vector<Tensor> params;
  for (int i = 0; i < 4; ++i) params.push_back(gaussian_tensor({2, 4}, 1.0, rng));
  const auto f = [&](Tape& tape, std::span<const Var> p) {
    return seg_loss(tape, {p[0], p[1]}, {p[2], p[3]}, gt, m, LossWeights{});
  };
  const GradCheckReport r = finite_diff_check(f, params);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}
