#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "bixformer/error.hpp"
#include "bixformer/mmd.hpp"
#include "bixformer/tensor.hpp"

namespace bixformer {

/// Operation kinds recorded on a tape. The set is closed on purpose: each
/// kind has exactly one gradient rule in Tape::backward.
enum class OpKind {
  kLeaf,
  kMatMul,
  kTranspose,
  kReshape,
  kSelectRows,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kLayerNorm,
  kRelu,
  kSigmoid,
  kLogSigmoid,
  kExp,
  kLog,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddScalar,
  kSum,
  kMean,
  kRowSum,
  kMmd,
};

inline constexpr double kLayerNormEps = 1e-5;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Single-owner record of a forward computation. Node ids are assigned in
/// creation order, so inputs always precede their consumers.
class Tape {
 public:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    double scalar = 0.0;              // scale factor / added constant
    std::vector<std::size_t> index;   // row indices for kSelectRows
    std::vector<Tensor> saved;        // op-specific forward values
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() loss with respect to `v`. Zero for
  /// nodes the loss does not reach.
  const Tensor& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape()) throw ContractError("grad() before backward()");
    return n.grad;
  }

  /// Records a non-leaf node. Intended for the op functions below.
  Var record(OpKind op, std::vector<Var> inputs, Tensor value, double scalar = 0.0,
             std::vector<std::size_t> index = {}, std::vector<Tensor> saved = {}) {
    Node n;
    n.op = op;
    for (const Var& in : inputs) {
      if (in.tape != this) throw ContractError("operands live on different tapes");
      n.inputs.push_back(in.id);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    n.value = std::move(value);
    n.scalar = scalar;
    n.index = std::move(index);
    n.saved = std::move(saved);
    return push(std::move(n));
  }

  /// Reverse sweep from a scalar loss. Gradients are reset first, so calling
  /// it twice yields identical results.
  void backward(Var loss);

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }
  void propagate(Node& n);

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape) throw ContractError("unbound Var");
  return tape->value(*this);
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw ContractError("unbound Var");
  return *a.tape;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline bool is_scalar(const Tensor& t) { return t.size() == 1 && t.rank() == 1; }

/// Equal shapes, or one side a [1] scalar.
inline Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(b)) return a.shape();
  if (is_scalar(a)) return b.shape();
  throw DimensionError(std::string(op) + " of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

template <class F>
Tensor binary_map(const Tensor& a, const Tensor& b, const Shape& shape, F f) {
  Tensor out(shape);
  const bool sa = a.size() == 1 && out.size() != 1, sb = b.size() == 1 && out.size() != 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(sa ? a[0] : a[i], sb ? b[0] : b[i]);
  return out;
}

template <class F>
Tensor unary_map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline double log_sigmoid(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Accumulates `g` into `dst`, summing over broadcast when dst is a scalar.
inline void accumulate(Tensor& dst, const Tensor& g) {
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  } else {
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
    dst[0] += s;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

inline Var matmul(Var a, Var b) {
  return detail::tape_of(a).record(OpKind::kMatMul, {a, b}, matmul_values(a.value(), b.value()));
}

inline Var transpose(Var a) {
  detail::require_matrix(a.value(), "transpose");
  return detail::tape_of(a).record(OpKind::kTranspose, {a}, transpose(a.value()));
}

inline Var reshape(Var a, Shape shape) {
  return detail::tape_of(a).record(OpKind::kReshape, {a}, a.value().reshaped(std::move(shape)));
}

/// Gathers rows by index; the gradient scatters back and adds on repeats.
inline Var select_rows(Var a, std::vector<std::size_t> idx) {
  detail::require_matrix(a.value(), "select_rows");
  Tensor v = select_rows(a.value(), idx);
  return detail::tape_of(a).record(OpKind::kSelectRows, {a}, std::move(v), 0.0, std::move(idx));
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

inline Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "softmax_rows");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) s += (out[j] = std::exp(in[j] - mx));
    for (double& v : out) v /= s;
  }
  return detail::tape_of(a).record(OpKind::kSoftmaxRows, {a}, std::move(y));
}

inline Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "log_softmax_rows");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (double v : in) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lse;
  }
  return detail::tape_of(a).record(OpKind::kLogSoftmaxRows, {a}, std::move(y));
}

/// Per-row standardization (population variance, epsilon inside the root)
/// followed by an elementwise affine map with gain and bias of length n.
inline Var layernorm(Var a, Var gain, Var bias) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "layernorm");
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 2) throw DimensionError("layernorm needs at least 2 columns, got " + std::to_string(n));
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layernorm gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " for rows of width " + std::to_string(n));
  Tensor xhat(x.shape()), inv_std({m});
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat.at(i, j) = (r[j] - mean) * is;
      y.at(i, j) = gain.value()[j] * xhat.at(i, j) + bias.value()[j];
    }
  }
  return detail::tape_of(a).record(OpKind::kLayerNorm, {a, gain, bias}, std::move(y), 0.0, {},
                                   {std::move(xhat), std::move(inv_std)});
}

// ---------------------------------------------------------------------------
// Pointwise

inline Var relu(Var a) {
  return detail::tape_of(a).record(OpKind::kRelu, {a},
                                   detail::unary_map(a.value(), [](double v) { return v > 0 ? v : 0.0; }));
}

inline Var sigmoid(Var a) {
  return detail::tape_of(a).record(OpKind::kSigmoid, {a}, detail::unary_map(a.value(), detail::sigmoid));
}

/// log(sigmoid(x)) without overflow for large |x|.
inline Var log_sigmoid(Var a) {
  return detail::tape_of(a).record(OpKind::kLogSigmoid, {a},
                                   detail::unary_map(a.value(), detail::log_sigmoid));
}

inline Var exp(Var a) {
  return detail::tape_of(a).record(OpKind::kExp, {a},
                                   detail::unary_map(a.value(), [](double v) { return std::exp(v); }));
}

inline Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw ContractError("log of a non-positive value");
  return detail::tape_of(a).record(OpKind::kLog, {a},
                                   detail::unary_map(a.value(), [](double v) { return std::log(v); }));
}

inline Var add(Var a, Var b) {
  auto s = detail::binary_shape(a.value(), b.value(), "add");
  return detail::tape_of(a).record(OpKind::kAdd, {a, b},
                                   detail::binary_map(a.value(), b.value(), s, std::plus<>{}));
}

inline Var sub(Var a, Var b) {
  auto s = detail::binary_shape(a.value(), b.value(), "sub");
  return detail::tape_of(a).record(OpKind::kSub, {a, b},
                                   detail::binary_map(a.value(), b.value(), s, std::minus<>{}));
}

inline Var mul(Var a, Var b) {
  auto s = detail::binary_shape(a.value(), b.value(), "mul");
  return detail::tape_of(a).record(OpKind::kMul, {a, b},
                                   detail::binary_map(a.value(), b.value(), s, std::multiplies<>{}));
}

inline Var div(Var a, Var b) {
  auto s = detail::binary_shape(a.value(), b.value(), "div");
  for (double v : b.value().data())
    if (v == 0.0) throw ContractError("division by zero");
  return detail::tape_of(a).record(OpKind::kDiv, {a, b},
                                   detail::binary_map(a.value(), b.value(), s, std::divides<>{}));
}

inline Var scale(Var a, double s) {
  return detail::tape_of(a).record(OpKind::kScale, {a},
                                   detail::unary_map(a.value(), [s](double v) { return s * v; }), s);
}

inline Var add_scalar(Var a, double s) {
  return detail::tape_of(a).record(OpKind::kAddScalar, {a},
                                   detail::unary_map(a.value(), [s](double v) { return v + s; }), s);
}

// ---------------------------------------------------------------------------
// Reductions (ascending index order)

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::tape_of(a).record(OpKind::kSum, {a}, Tensor::scalar(s));
}

inline Var mean(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::tape_of(a).record(OpKind::kMean, {a},
                                   Tensor::scalar(s / static_cast<double>(a.value().size())));
}

/// m x n -> m x 1.
inline Var row_sum(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "row_sum");
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v;
    out[i] = s;
  }
  return detail::tape_of(a).record(OpKind::kRowSum, {a}, std::move(out));
}

/// Biased squared MMD between the rows of `a` and `b` (see mmd_with_grad).
inline Var mmd2(Var a, Var b) {
  MmdResult r = mmd_with_grad(a.value(), b.value());
  return detail::tape_of(a).record(OpKind::kMmd, {a, b}, Tensor::scalar(r.value), 0.0, {},
                                   {std::move(r.grad_a), std::move(r.grad_b)});
}

// ---------------------------------------------------------------------------
// Reverse sweep

inline void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss lives on a different tape");
  if (nodes_.at(loss.id).value.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(nodes_[loss.id].value.shape()));
  for (Node& n : nodes_)
    if (n.requires_grad) n.grad = Tensor(n.value.shape(), 0.0);
  nodes_[loss.id].grad[0] = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.op == OpKind::kLeaf || !n.requires_grad) continue;
    propagate(n);
  }
}

inline void Tape::propagate(Node& n) {
  const Tensor& g = n.grad;
  auto in = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return in(k).requires_grad; };

  switch (n.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = in(0).value;
      const Tensor& b = in(1).value;
      if (wants(0)) detail::accumulate(in(0).grad, matmul_values(g, transpose(b)));
      if (wants(1)) detail::accumulate(in(1).grad, matmul_values(transpose(a), g));
      break;
    }
    case OpKind::kTranspose:
      if (wants(0)) detail::accumulate(in(0).grad, transpose(g));
      break;
    case OpKind::kReshape:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) in(0).grad[i] += g[i];
      break;
    case OpKind::kSelectRows:
      if (wants(0)) {
        Tensor& dst = in(0).grad;
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < n.index.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) dst.at(n.index[r], j) += g.at(r, j);
      }
      break;
    case OpKind::kSoftmaxRows:
      if (wants(0)) {
        const Tensor& y = n.value;
        Tensor& dst = in(0).grad;
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) dst.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
      }
      break;
    case OpKind::kLogSoftmaxRows:
      if (wants(0)) {
        const Tensor& y = n.value;
        Tensor& dst = in(0).grad;
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) gs += g.at(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) dst.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
        }
      }
      break;
    case OpKind::kLayerNorm: {
      const Tensor& xhat = n.saved[0];
      const Tensor& inv_std = n.saved[1];
      const Tensor& gain = in(1).value;
      const std::size_t m = xhat.rows(), w = xhat.cols();
      if (wants(1))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) in(1).grad[j] += g.at(i, j) * xhat.at(i, j);
      if (wants(2))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) in(2).grad[j] += g.at(i, j);
      if (wants(0)) {
        Tensor& dst = in(0).grad;
        std::vector<double> dxhat(w);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            dxhat[j] = g.at(i, j) * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat.at(i, j);
          }
          mean_d /= static_cast<double>(w);
          mean_dx /= static_cast<double>(w);
          for (std::size_t j = 0; j < w; ++j)
            dst.at(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat.at(i, j) * mean_dx);
        }
      }
      break;
    }
    case OpKind::kRelu:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (in(0).value[i] > 0) in(0).grad[i] += g[i];
      break;
    case OpKind::kSigmoid:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = n.value[i];
          in(0).grad[i] += g[i] * s * (1.0 - s);
        }
      break;
    case OpKind::kLogSigmoid:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) in(0).grad[i] += g[i] * detail::sigmoid(-in(0).value[i]);
      break;
    case OpKind::kExp:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) in(0).grad[i] += g[i] * n.value[i];
      break;
    case OpKind::kLog:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) in(0).grad[i] += g[i] / in(0).value[i];
      break;
    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign = n.op == OpKind::kAdd ? 1.0 : -1.0;
      if (wants(0)) detail::accumulate(in(0).grad, g);
      if (wants(1)) {
        Tensor t = g;
        for (double& v : t.data()) v *= sign;
        detail::accumulate(in(1).grad, t);
      }
      break;
    }
    case OpKind::kMul:
    case OpKind::kDiv: {
      const Tensor& a = in(0).value;
      const Tensor& b = in(1).value;
      const bool sa = a.size() == 1 && g.size() != 1, sb = b.size() == 1 && g.size() != 1;
      Tensor ga(g.shape()), gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double av = sa ? a[0] : a[i], bv = sb ? b[0] : b[i];
        if (n.op == OpKind::kMul) {
          ga[i] = g[i] * bv;
          gb[i] = g[i] * av;
        } else {
          ga[i] = g[i] / bv;
          gb[i] = -g[i] * av / (bv * bv);
        }
      }
      if (wants(0)) detail::accumulate(in(0).grad, ga);
      if (wants(1)) detail::accumulate(in(1).grad, gb);
      break;
    }
    case OpKind::kScale:
      if (wants(0))
        for (std::size_t i = 0; i < g.size(); ++i) in(0).grad[i] += n.scalar * g[i];
      break;
    case OpKind::kAddScalar:
      if (wants(0)) detail::accumulate(in(0).grad, g);
      break;
    case OpKind::kSum:
      if (wants(0))
        for (double& v : in(0).grad.data()) v += g[0];
      break;
    case OpKind::kMean:
      if (wants(0)) {
        const double s = g[0] / static_cast<double>(in(0).value.size());
        for (double& v : in(0).grad.data()) v += s;
      }
      break;
    case OpKind::kRowSum:
      if (wants(0)) {
        Tensor& dst = in(0).grad;
        for (std::size_t i = 0; i < dst.rows(); ++i)
          for (std::size_t j = 0; j < dst.cols(); ++j) dst.at(i, j) += g[i];
      }
      break;
    case OpKind::kMmd:
      for (std::size_t k = 0; k < 2; ++k)
        if (wants(k))
          for (std::size_t i = 0; i < n.saved[k].size(); ++i) in(k).grad[i] += g[0] * n.saved[k][i];
      break;
  }
}

}  // namespace bixformer
