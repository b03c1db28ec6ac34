// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spt/numcore/array.hpp"

namespace spt {

/// Handle to a node of a Graph. Only meaningful for the graph that issued it.
struct Var {
  static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = npos;
  bool valid() const { return id != npos; }
};

enum class Op : std::uint8_t {
  leaf,
  matmul,     // a * b
  matmul_nt,  // a * b^T
  add,        // a + b, b either same shape or a 1xN row broadcast over rows
  concat_rows,
  concat_cols,
  slice_rows,
  slice_cols,
  softmax_rows,
  log_softmax_rows,
  layer_norm_rows,
  gelu,
  mean_rows,  // column means, (R x N) -> (1 x N)
  scale,
  select_row,
  sum,
  dot_const,  // sum(a .* W) with W constant
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::add: return "add";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::softmax_rows: return "softmax_rows";
    case Op::log_softmax_rows: return "log_softmax_rows";
    case Op::layer_norm_rows: return "layer_norm_rows";
    case Op::gelu: return "gelu";
    case Op::mean_rows: return "mean_rows";
    case Op::scale: return "scale";
    case Op::select_row: return "select_row";
    case Op::sum: return "sum";
    case Op::dot_const: return "dot_const";
  }
  return "?";
}

namespace detail {

template <class T>
T gelu_exact(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_exact_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

}  // namespace detail

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward() is a single reverse sweep. Gradients are
/// accumulated in a fixed order, which makes repeated runs bit-identical.
/// A graph is single-use per forward pass and must not be shared between
/// threads.
template <class T>
class Graph {
 public:
  using Mat = Matrix<T>;

  static constexpr T layer_norm_eps = T(1e-6);

  Graph() { nodes_.reserve(256); }

  /// Leaf owning its value.
  Var input(Mat value, bool requires_grad = true) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  /// Leaf referencing an external matrix that must outlive the graph.
  Var param(const Mat& value, bool requires_grad = true) {
    Node n;
    n.op = Op::leaf;
    n.external = &value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Mat value) { return input(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }

  const Mat& value(Var v) const { return val(checked(v, "value")); }

  bool requires_grad(Var v) const { return nodes_[checked(v, "requires_grad")].requires_grad; }

  // ---- primitives --------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.cols() != y.rows()) shape_fail("matmul", x, y);
    Node n = make(Op::matmul, a, b);
    n.value.noalias() = x * y;
    return push(std::move(n));
  }

  Var matmul_nt(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.cols() != y.cols()) shape_fail("matmul_nt", x, y);
    Node n = make(Op::matmul_nt, a, b);
    n.value.noalias() = x * y.transpose();
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    Node n = make(Op::add, a, b);
    if (x.rows() == y.rows() && x.cols() == y.cols()) {
      n.value = x + y;
    } else if (y.rows() == 1 && x.cols() == y.cols()) {
      n.value = x.rowwise() + y.row(0);
    } else {
      shape_fail("add", x, y);
    }
    return push(std::move(n));
  }

  Var concat_rows(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.cols() != y.cols()) shape_fail("concat_rows", x, y);
    Node n = make(Op::concat_rows, a, b);
    n.value.resize(x.rows() + y.rows(), x.cols());
    n.value.topRows(x.rows()) = x;
    n.value.bottomRows(y.rows()) = y;
    return push(std::move(n));
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Node n;
    n.op = Op::concat_cols;
    Index rows = value(parts[0]).rows();
    Index cols = 0;
    for (Var p : parts) {
      const Mat& x = value(p);
      if (x.rows() != rows) shape_fail("concat_cols", value(parts[0]), x);
      cols += x.cols();
      n.inputs.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    n.value.resize(rows, cols);
    Index at = 0;
    for (Var p : parts) {
      const Mat& x = value(p);
      n.value.middleCols(at, x.cols()) = x;
      at += x.cols();
    }
    return push(std::move(n));
  }

  Var slice_rows(Var a, Index begin, Index count) {
    const Mat& x = value(a);
    if (begin < 0 || count <= 0 || begin + count > x.rows()) {
      throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of " + shape_str(x));
    }
    Node n = make(Op::slice_rows, a);
    n.i0 = begin;
    n.i1 = count;
    n.value = x.middleRows(begin, count);
    return push(std::move(n));
  }

  Var slice_cols(Var a, Index begin, Index count) {
    const Mat& x = value(a);
    if (begin < 0 || count <= 0 || begin + count > x.cols()) {
      throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of " + shape_str(x));
    }
    Node n = make(Op::slice_cols, a);
    n.i0 = begin;
    n.i1 = count;
    n.value = x.middleCols(begin, count);
    return push(std::move(n));
  }

  Var select_row(Var a, Index row) {
    const Mat& x = value(a);
    if (row < 0 || row >= x.rows()) {
      throw ShapeError("select_row: row " + std::to_string(row) + " out of " + shape_str(x));
    }
    Node n = make(Op::select_row, a);
    n.i0 = row;
    n.value = x.row(row);
    return push(std::move(n));
  }

  /// Row-wise softmax with max subtraction.
  Var softmax_rows(Var a) {
    const Mat& x = value(a);
    Node n = make(Op::softmax_rows, a);
    n.value.resize(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      const T mx = x.row(r).maxCoeff();
      n.value.row(r) = (x.row(r).array() - mx).exp();
      n.value.row(r) /= n.value.row(r).sum();
    }
    return push(std::move(n));
  }

  Var log_softmax_rows(Var a) {
    const Mat& x = value(a);
    Node n = make(Op::log_softmax_rows, a);
    n.value.resize(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      const T mx = x.row(r).maxCoeff();
      const T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
      n.value.row(r) = x.row(r).array() - lse;
    }
    return push(std::move(n));
  }

  /// Per-row normalization to zero mean and unit variance, then an
  /// elementwise affine map. Epsilon sits inside the square root.
  Var layer_norm_rows(Var x_var, Var gamma, Var beta, T eps = layer_norm_eps) {
    const Mat& x = value(x_var);
    const Mat& g = value(gamma);
    const Mat& b = value(beta);
    if (g.rows() != 1 || b.rows() != 1 || g.cols() != x.cols() || b.cols() != x.cols()) {
      throw ShapeError("layer_norm_rows: input " + shape_str(x) + " with scale " + shape_str(g) +
                       " and shift " + shape_str(b));
    }
    Node n = make(Op::layer_norm_rows, x_var, gamma, beta);
    const Index rows = x.rows();
    const Index cols = x.cols();
    n.aux.resize(rows, cols);  // normalized input
    n.aux2.resize(rows, 1);    // reciprocal std
    for (Index r = 0; r < rows; ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      const T rstd = T(1) / std::sqrt(var + eps);
      n.aux.row(r) = (x.row(r).array() - mean) * rstd;
      n.aux2(r, 0) = rstd;
    }
    n.value = (n.aux.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    return push(std::move(n));
  }

  /// Exact Gaussian-CDF GELU.
  Var gelu(Var a) {
    Node n = make(Op::gelu, a);
    n.value = value(a).unaryExpr([](T v) { return detail::gelu_exact(v); });
    return push(std::move(n));
  }

  Var mean_rows(Var a) {
    Node n = make(Op::mean_rows, a);
    n.value = value(a).colwise().mean();
    return push(std::move(n));
  }

  Var scale(Var a, T s) {
    Node n = make(Op::scale, a);
    n.scalar = s;
    n.value = value(a) * s;
    return push(std::move(n));
  }

  Var sum(Var a) {
    Node n = make(Op::sum, a);
    n.value = Mat::Constant(1, 1, value(a).sum());
    return push(std::move(n));
  }

  Var dot_const(Var a, Mat weights) {
    const Mat& x = value(a);
    if (x.rows() != weights.rows() || x.cols() != weights.cols()) {
      shape_fail("dot_const", x, weights);
    }
    Node n = make(Op::dot_const, a);
    n.value = Mat::Constant(1, 1, x.cwiseProduct(weights).sum());
    n.aux = std::move(weights);
    return push(std::move(n));
  }

  // ---- reverse sweep -----------------------------------------------------

  /// Seeds d(out)/d(out) = 1 and propagates to every node that requires a
  /// gradient. `out` must be a 1x1 node.
  void backward(Var out) {
    const std::uint32_t seed = checked(out, "backward");
    const Mat& o = val(seed);
    if (o.rows() != 1 || o.cols() != 1) {
      throw ShapeError("backward: seed must be a scalar node, got " + shape_str(o));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(seed, Mat::Ones(1, 1));
    for (std::int64_t i = seed; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || n.op == Op::leaf) continue;
      propagate(static_cast<std::uint32_t>(i));
    }
  }

  /// Gradient of the last backward() seed with respect to `v`. Nodes that
  /// the seed does not depend on get a zero matrix.
  const Mat& grad(Var v) {
    const std::uint32_t id = checked(v, "grad");
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const Mat& x = val(id);
      n.grad = Mat::Zero(x.rows(), x.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

 private:
  struct Node {
    Op op = Op::leaf;
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::uint32_t a = Var::npos, b = Var::npos, c = Var::npos;
    std::vector<std::uint32_t> inputs;
    T scalar{};
    Index i0 = 0, i1 = 0;
    Mat aux, aux2;
  };

  std::vector<Node> nodes_;

  const Mat& val(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  std::uint32_t checked(Var v, const char* what) const {
    if (!v.valid() || v.id >= nodes_.size()) {
      throw std::out_of_range(std::string(what) + ": variable is not a node of this graph");
    }
    return v.id;
  }

  Node make(Op op, Var a, Var b = {}, Var c = {}) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.c = c.id;
    for (Var v : {a, b, c}) {
      if (v.valid()) n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return n;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  [[noreturn]] static void shape_fail(const char* op, const Mat& x, const Mat& y) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(x) + " and " +
                     shape_str(y));
  }

  bool wants(std::uint32_t id) const { return id != Var::npos && nodes_[id].requires_grad; }

  template <class Expr>
  void accumulate(std::uint32_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  // Zero-initialized gradient buffer for partial (slice) contributions.
  Mat& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const Mat& x = val(id);
      n.grad = Mat::Zero(x.rows(), x.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void propagate(std::uint32_t id) {
    // Inputs always have smaller ids, so accumulating into them never touches
    // this node's own gradient.
    const Node& n = nodes_[id];
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::matmul: {
        if (wants(n.a)) accumulate(n.a, g * val(n.b).transpose());
        if (wants(n.b)) accumulate(n.b, val(n.a).transpose() * g);
        break;
      }
      case Op::matmul_nt: {
        if (wants(n.a)) accumulate(n.a, g * val(n.b));
        if (wants(n.b)) accumulate(n.b, g.transpose() * val(n.a));
        break;
      }
      case Op::add: {
        if (wants(n.a)) accumulate(n.a, g);
        if (wants(n.b)) {
          if (val(n.b).rows() == g.rows()) {
            accumulate(n.b, g);
          } else {
            accumulate(n.b, g.colwise().sum());
          }
        }
        break;
      }
      case Op::concat_rows: {
        const Index top = val(n.a).rows();
        if (wants(n.a)) accumulate(n.a, g.topRows(top));
        if (wants(n.b)) accumulate(n.b, g.bottomRows(g.rows() - top));
        break;
      }
      case Op::concat_cols: {
        Index at = 0;
        for (std::uint32_t in : n.inputs) {
          const Index w = val(in).cols();
          if (wants(in)) accumulate(in, g.middleCols(at, w));
          at += w;
        }
        break;
      }
      case Op::slice_rows: {
        if (wants(n.a)) grad_buffer(n.a).middleRows(n.i0, n.i1) += g;
        break;
      }
      case Op::slice_cols: {
        if (wants(n.a)) grad_buffer(n.a).middleCols(n.i0, n.i1) += g;
        break;
      }
      case Op::select_row: {
        if (wants(n.a)) grad_buffer(n.a).row(n.i0) += g.row(0);
        break;
      }
      case Op::softmax_rows: {
        if (!wants(n.a)) break;
        const Mat& y = n.value;
        Mat dx(y.rows(), y.cols());
        for (Index r = 0; r < y.rows(); ++r) {
          const T dot = g.row(r).dot(y.row(r));
          dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
        }
        accumulate(n.a, dx);
        break;
      }
      case Op::log_softmax_rows: {
        if (!wants(n.a)) break;
        const Mat& y = n.value;
        Mat dx(y.rows(), y.cols());
        for (Index r = 0; r < y.rows(); ++r) {
          const T gs = g.row(r).sum();
          dx.row(r) = g.row(r).array() - y.row(r).array().exp() * gs;
        }
        accumulate(n.a, dx);
        break;
      }
      case Op::layer_norm_rows: {
        const Mat& xhat = n.aux;
        const Mat& gamma = val(n.b);
        if (wants(n.b)) accumulate(n.b, (g.array() * xhat.array()).colwise().sum().matrix());
        if (wants(n.c)) accumulate(n.c, g.colwise().sum());
        if (wants(n.a)) {
          const Index cols = xhat.cols();
          Mat dx(xhat.rows(), cols);
          for (Index r = 0; r < xhat.rows(); ++r) {
            const auto dxhat = (g.row(r).array() * gamma.row(0).array()).eval();
            const T mean_d = dxhat.sum() / T(cols);
            const T mean_dx = (dxhat * xhat.row(r).array()).sum() / T(cols);
            dx.row(r) = n.aux2(r, 0) * (dxhat - mean_d - xhat.row(r).array() * mean_dx);
          }
          accumulate(n.a, dx);
        }
        break;
      }
      case Op::gelu: {
        if (!wants(n.a)) break;
        const Mat& x = val(n.a);
        accumulate(n.a, (g.array() * x.unaryExpr([](T v) {
                                          return detail::gelu_exact_grad(v);
                                        }).array())
                            .matrix());
        break;
      }
      case Op::mean_rows: {
        if (!wants(n.a)) break;
        const Index rows = val(n.a).rows();
        Mat dx = g.replicate(rows, 1) / T(rows);
        accumulate(n.a, dx);
        break;
      }
      case Op::scale: {
        if (wants(n.a)) accumulate(n.a, g * n.scalar);
        break;
      }
      case Op::sum: {
        if (!wants(n.a)) break;
        const Mat& x = val(n.a);
        accumulate(n.a, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case Op::dot_const: {
        if (wants(n.a)) accumulate(n.a, n.aux * g(0, 0));
        break;
      }
    }
  }
};

}  // namespace spt
