#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <tuple>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/tensor.hpp"

namespace bixformer {

inline constexpr double kMmdBandwidthFloor = 1e-6;

struct MmdResult {
  double value = 0.0;      // biased squared MMD, unclamped
  double bandwidth = 0.0;  // h in exp(-d / (2h))
  Tensor grad_a;           // dvalue/da, same shape as a
  Tensor grad_b;
};

/// Biased squared MMD between the row sets of `a` and `b` under a Gaussian
/// kernel exp(-||u - v||^2 / (2h)). The bandwidth h is the median squared
/// distance over unordered pairs of the pooled rows (mean of the two middle
/// pairs for an even count), floored at 1e-6.
///
/// The gradient accounts for the bandwidth's own dependence on the inputs
/// (through the median pair), so it agrees with finite differences wherever
/// the median pair is unique.
inline MmdResult mmd_with_grad(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("mmd expects matrices");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("mmd of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t ma = a.dim(0), mb = b.dim(0), dim = a.dim(1);
  const std::size_t n = ma + mb;
  auto point = [&](std::size_t i) { return i < ma ? a.row(i) : b.row(i - ma); };

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      auto u = point(i), v = point(j);
      double acc = 0.0;
      for (std::size_t c = 0; c < dim; ++c) acc += (u[c] - v[c]) * (u[c] - v[c]);
      dist[i * n + j] = dist[j * n + i] = acc;
    }

  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  pairs.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(dist[i * n + j], i, j);
  std::sort(pairs.begin(), pairs.end());
  const std::size_t np = pairs.size();
  double h = np % 2 ? std::get<0>(pairs[np / 2])
                    : 0.5 * (std::get<0>(pairs[np / 2 - 1]) + std::get<0>(pairs[np / 2]));
  const bool floored = h < kMmdBandwidthFloor;
  if (floored) h = kMmdBandwidthFloor;

  auto coeff = [&](std::size_t i, std::size_t j) {
    const bool ia = i < ma, ja = j < ma;
    if (ia && ja) return 1.0 / static_cast<double>(ma * ma);
    if (!ia && !ja) return 1.0 / static_cast<double>(mb * mb);
    return -1.0 / static_cast<double>(ma * mb);
  };

  // Diagonal terms contribute k = 1.
  double value = static_cast<double>(ma) * coeff(0, 0) + static_cast<double>(mb) * coeff(ma, ma);
  std::vector<double> pair_grad(n * n, 0.0);  // dvalue/dD_ij for i < j, direct part
  double dvalue_dh = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = dist[i * n + j];
      const double k = std::exp(-d / (2.0 * h));
      const double c = coeff(i, j);
      value += 2.0 * c * k;
      pair_grad[i * n + j] = -c * k / h;
      dvalue_dh += c * k * d / (h * h);
    }
  if (!floored) {
    if (np % 2) {
      auto [d, i, j] = pairs[np / 2];
      pair_grad[i * n + j] += dvalue_dh;
    } else {
      for (std::size_t s : {np / 2 - 1, np / 2}) {
        auto [d, i, j] = pairs[s];
        pair_grad[i * n + j] += 0.5 * dvalue_dh;
      }
    }
  }

  MmdResult out{value, h, Tensor(a.shape()), Tensor(b.shape())};
  auto grad_row = [&](std::size_t i) {
    return i < ma ? out.grad_a.row(i) : out.grad_b.row(i - ma);
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double g = pair_grad[i * n + j];
      if (g == 0.0) continue;
      auto u = point(i), v = point(j);
      auto gu = grad_row(i), gv = grad_row(j);
      for (std::size_t c = 0; c < dim; ++c) {
        const double t = 2.0 * g * (u[c] - v[c]);
        gu[c] += t;
        gv[c] -= t;
      }
    }
  return out;
}

/// Squared MMD, clamped at zero against round-off.
inline double mmd(const Tensor& a, const Tensor& b) {
  if (a.size() == 0 || b.size() == 0) throw ContractError("mmd of an empty set");
  return std::max(0.0, mmd_with_grad(a, b).value);
}

}  // namespace bixformer
