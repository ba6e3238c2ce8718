#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "bixformer/autodiff.hpp"

namespace bixformer {

/// Builds a scalar loss on `tape` from the bound parameter leaves.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

namespace detail {

inline double evaluate(const LossBuilder& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.leaf(p));
  return f(tape, vars).value().item();
}

}  // namespace detail

/// Compares tape gradients of `f` against central differences
/// (f(p+eps) - f(p-eps)) / 2eps on every coordinate of every parameter.
/// Relative error uses max(|analytic|, |numeric|, floor) as denominator, so
/// coordinates with gradients below `floor` are judged on that absolute scale.
inline GradCheckReport finite_diff_check(const LossBuilder& f, std::vector<Tensor> params,
                                         double eps = 1e-5, double tol = 1e-4, double floor = 1e-8) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ContractError("finite-difference step must lie in (0, 1e-2]");

  const double base = detail::evaluate(f, params);
  if (detail::evaluate(f, params) != base)
    throw DeterminismError("two evaluations at the same point differ");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.leaf(p));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + eps;
      const double up = detail::evaluate(f, params);
      params[p][i] = orig - eps;
      const double down = detail::evaluate(f, params);
      params[p][i] = orig;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace bixformer
