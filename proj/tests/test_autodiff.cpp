#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/gradcheck.hpp"
#include "bixformer/rng.hpp"

using namespace bixformer;

namespace {

Tensor random_tensor(Shape shape, SplitMix64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  return out;
}

}  // namespace

TEST(Tensor, MatmulMatchesTripleLoopBitwise) {
  SplitMix64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto k = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    EXPECT_EQ(matmul_values(a, b), naive_matmul(a, b));
  }
}

TEST(Tensor, ShapeChecks) {
  EXPECT_THROW(matmul_values(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(transpose(m).at(2, 1), 6.0);
  EXPECT_EQ(Tensor({4, 2, 3}).cols(), 6u);
}

TEST(Autodiff, SoftmaxRowsMatchesExpNormalize) {
  Tape tape;
  const Tensor x = Tensor::matrix({{1.0, 2.0, 3.0}, {-1000.0, 0.0, 1000.0}});
  const Tensor y = softmax_rows(tape.constant(x)).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y.at(0, 0), std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y.at(0, 2), std::exp(3.0) / z, 1e-15);
  EXPECT_EQ(y.at(1, 2), 1.0);
  EXPECT_EQ(y.at(1, 0), 0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (double v : y.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Tensor ly = log_softmax_rows(tape.constant(x)).value();
  EXPECT_NEAR(ly.at(0, 1), 2.0 - std::log(z), 1e-14);
  EXPECT_TRUE(std::isfinite(ly.at(1, 0)));
}

TEST(Autodiff, LayerNormClosedForm) {
  Tape tape;
  const Tensor x = Tensor::matrix({{1.0, 2.0, 3.0, 4.0}});
  const Var y = layernorm(tape.constant(x), tape.constant(Tensor({4}, 2.0)), tape.constant(Tensor({4}, 0.5)));
  // mean 2.5, population variance 1.25
  const double is = 1.0 / std::sqrt(1.25 + kLayerNormEps);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.value().at(0, j), 2.0 * (x[j] - 2.5) * is + 0.5, 1e-14);
  EXPECT_THROW(layernorm(tape.constant(Tensor({2, 1})), tape.constant(Tensor({1})), tape.constant(Tensor({1}))),
               DimensionError);
}

TEST(Autodiff, ElementaryGradients) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{0.5, -1.0}, {2.0, 0.25}}));
  Var b = tape.leaf(Tensor::matrix({{1.5, 2.0}, {-0.5, 4.0}}));
  Var loss = sum(add(mul(a, b), div(a, b)));
  tape.backward(loss);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(tape.grad(a)[i], b.value()[i] + 1.0 / b.value()[i]);
    EXPECT_DOUBLE_EQ(tape.grad(b)[i], a.value()[i] - a.value()[i] / (b.value()[i] * b.value()[i]));
  }
}

TEST(Autodiff, BackwardIsIdempotent) {
  SplitMix64 rng(2);
  Tape tape;
  Var w = tape.leaf(random_tensor({3, 4}, rng));
  Var x = tape.constant(random_tensor({2, 3}, rng));
  Var loss = mean(sigmoid(matmul(x, w)));
  tape.backward(loss);
  const Tensor g1 = tape.grad(w);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(w), g1);
}

TEST(Autodiff, ScalarBroadcastGradientSums) {
  Tape tape;
  Var s = tape.leaf(Tensor::scalar(3.0));
  Var m = tape.leaf(Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}}));
  tape.backward(sum(mul(m, s)));
  EXPECT_DOUBLE_EQ(tape.grad(s).item(), 10.0);
  EXPECT_DOUBLE_EQ(tape.grad(m)[3], 3.0);
}

TEST(Autodiff, SelectRowsScattersOnRepeats) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}}));
  tape.backward(sum(select_rows(a, {1, 1, 0})));
  EXPECT_EQ(tape.grad(a), Tensor::matrix({{1.0, 1.0}, {2.0, 2.0}}));
}

TEST(Autodiff, Errors) {
  Tape tape, other;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = other.leaf(Tensor({2, 3}));
  EXPECT_THROW(add(a, b), ContractError);
  EXPECT_THROW(add(a, tape.leaf(Tensor({3, 2}))), DimensionError);
  EXPECT_THROW(log(a), ContractError);
  EXPECT_THROW(div(a, tape.leaf(Tensor({2, 3}, 0.0))), ContractError);
  EXPECT_THROW(tape.grad(a), ContractError);
  EXPECT_THROW(other.backward(sum(a)), ContractError);
  EXPECT_THROW(Var{}.value(), ContractError);
}

// Random compositions of every differentiable op, checked against central
// differences.
TEST(Autodiff, RandomGraphsAgreeWithFiniteDifferences) {
  SplitMix64 rng(3);
  int failures = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::uint64_t graph_seed = rng.next();
    const auto builder = [graph_seed](Tape& tape, std::span<const Var> p) {
      SplitMix64 g(graph_seed);
      Var x = p[0];  // 3 x 4
      Var y = p[1];  // 3 x 4
      Var w = p[2];  // 4 x 4
      const int ops = static_cast<int>(g.uniform_int(2, 6));
      for (int i = 0; i < ops; ++i) {
        switch (g.uniform_int(0, 13)) {
          case 0: x = matmul(x, w); break;
          case 1: x = softmax_rows(x); break;
          case 2: x = log_softmax_rows(x); break;
          case 3: x = layernorm(x, p[3], p[4]); break;
          case 4: x = sigmoid(x); break;
          case 5: x = log_sigmoid(x); break;
          case 6: x = exp(scale(sigmoid(x), 0.5)); break;
          case 7: x = log(add_scalar(sigmoid(x), 0.1)); break;
          case 8: x = add(x, y); break;
          case 9: x = sub(x, y); break;
          case 10: x = mul(x, y); break;
          case 11: x = div(x, add_scalar(exp(y), 0.5)); break;
          case 12: x = transpose(matmul(w, transpose(x))); break;
          default: x = add(x, select_rows(y, {2, 0, 0})); break;
        }
      }
      Var r = row_sum(mul(x, x));
      return add(mean(r), scale(sum(x), 0.3));
    };
    std::vector<Tensor> params{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                               random_tensor({4, 4}, rng, 0.5), random_tensor({4}, rng),
                               random_tensor({4}, rng)};
    const GradCheckReport r = finite_diff_check(builder, params, 1e-5, 1e-4, 1e-6);
    if (!r.passed()) {
      ++failures;
      ADD_FAILURE() << "graph " << t << ": max rel error " << r.max_rel_error << " (analytic " << r.analytic
                    << ", numeric " << r.numeric << ")";
    }
    if (failures > 5) break;
  }
  EXPECT_EQ(failures, 0);
}

TEST(Autodiff, ReluGradientAwayFromKink) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({-1.0, 2.0}));
  tape.backward(sum(relu(a)));
  EXPECT_EQ(tape.grad(a), Tensor::vector({0.0, 1.0}));
}

TEST(GradCheck, RejectsBadStep) {
  const auto f = [](Tape&, std::span<const Var> p) { return sum(p[0]); };
  EXPECT_THROW(finite_diff_check(f, {Tensor({2})}, 0.0), ContractError);
  EXPECT_THROW(finite_diff_check(f, {Tensor({2})}, 0.5), ContractError);
}
