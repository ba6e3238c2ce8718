#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/tensor.hpp"

namespace bixformer {

/// Row-major n_q x n_y matching costs; queries are rows, labels columns.
/// n_y may be zero (an image without labels).
class CostMatrix {
 public:
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> cost = {})
      : rows_(rows), cols_(cols), cost_(std::move(cost)) {
    if (rows_ == 0) throw ContractError("cost matrix needs at least one row");
    if (cost_.empty()) cost_.assign(rows_ * cols_, 0.0);
    if (cost_.size() != rows_ * cols_)
      throw DimensionError("cost data length " + std::to_string(cost_.size()) + " for " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  explicit CostMatrix(const Tensor& t) : CostMatrix(t.rows(), t.cols(), t.values()) {
    if (t.rank() != 2) throw DimensionError("cost matrix from " + shape_str(t.shape()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return cost_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return cost_[r * cols_ + c]; }
  const std::vector<double>& values() const noexcept { return cost_; }

  bool all_finite() const {
    for (double v : cost_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::size_t rows_, cols_;
  std::vector<double> cost_;
};

struct AssignedPair {
  std::size_t row;
  std::size_t col;
  friend bool operator==(const AssignedPair&, const AssignedPair&) = default;
};

/// One pair per column, ordered by column.
struct Assignment {
  std::vector<AssignedPair> pairs;
  double total_cost = 0.0;
};

namespace detail {

inline void check_solvable(const CostMatrix& c) {
  if (c.rows() < c.cols())
    throw InfeasibleError(std::to_string(c.rows()) + " rows cannot cover " + std::to_string(c.cols()) +
                          " columns");
  if (!c.all_finite()) throw ContractError("cost matrix has non-finite entries");
}

/// Sums selected costs in column order so both solvers agree bit-for-bit.
inline double pair_cost(const CostMatrix& c, const std::vector<AssignedPair>& pairs) {
  double total = 0.0;
  for (const auto& p : pairs) total += c(p.row, p.col);
  return total;
}

}  // namespace detail

/// Exact minimum-cost assignment of every column to a distinct row.
///
/// The matrix is padded to n_q x n_q with zero-cost dummy columns; every
/// completion uses each dummy column once, so padding cannot change which
/// real assignment is optimal. The square problem is solved with the
/// shortest-augmenting-path method using row/column potentials, O(n^3).
inline Assignment solve_hungarian(const CostMatrix& c) {
  detail::check_solvable(c);
  const std::size_t ny = c.cols();
  if (ny == 0) return {};
  const std::size_t n = c.rows();
  auto cost = [&](std::size_t i, std::size_t j) { return j < ny ? c(i, j) : 0.0; };

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based with a sentinel at index 0; owner[j] is the row holding column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.pairs.reserve(ny);
  for (std::size_t j = 1; j <= ny; ++j) out.pairs.push_back({owner[j] - 1, j - 1});
  out.total_cost = detail::pair_cost(c, out.pairs);
  return out;
}

inline constexpr std::size_t kBruteForceMaxCols = 8;

/// Exhaustive search over injective column-to-row maps. Among cost-minimal
/// maps it returns the lexicographically smallest row sequence
/// (row of column 0, row of column 1, ...).
inline Assignment solve_bruteforce(const CostMatrix& c) {
  if (c.cols() > kBruteForceMaxCols)
    throw ContractError("brute force limited to " + std::to_string(kBruteForceMaxCols) + " columns, got " +
                        std::to_string(c.cols()));
  detail::check_solvable(c);
  const std::size_t ny = c.cols(), nq = c.rows();
  if (ny == 0) return {};

  std::vector<AssignedPair> current(ny), best;
  std::vector<char> used(nq, 0);
  double best_cost = std::numeric_limits<double>::infinity();

  auto recurse = [&](auto&& self, std::size_t col) -> void {
    if (col == ny) {
      const double total = detail::pair_cost(c, current);
      if (total < best_cost) {
        best_cost = total;
        best = current;
      }
      return;
    }
    for (std::size_t r = 0; r < nq; ++r) {
      if (used[r]) continue;
      used[r] = 1;
      current[col] = {r, col};
      self(self, col + 1);
      used[r] = 0;
    }
  };
  recurse(recurse, 0);
  return {best, best_cost};
}

}  // namespace bixformer
