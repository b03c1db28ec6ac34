// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "spt/numcore/graph.hpp"

namespace spt {

/// Central-difference gradient of a scalar function. Uses only forward
/// evaluations and so serves as an oracle for Graph::backward().
inline Matrix<double> numeric_gradient(const std::function<double(const Matrix<double>&)>& f,
                                       const Matrix<double>& point, double eps) {
  Matrix<double> grad(point.rows(), point.cols());
  Matrix<double> probe = point;
  for (Index r = 0; r < point.rows(); ++r) {
    for (Index c = 0; c < point.cols(); ++c) {
      const double orig = probe(r, c);
      probe(r, c) = orig + eps;
      const double up = f(probe);
      probe(r, c) = orig - eps;
      const double down = f(probe);
      probe(r, c) = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::domain_error("finite_diff_check: non-finite function value");
      }
      grad(r, c) = (up - down) / (2.0 * eps);
    }
  }
  return grad;
}

/// Largest coordinatewise relative error between two gradients, with
/// denominator max(|analytic|, |numeric|, 1e-12).
inline double max_relative_error(const Matrix<double>& analytic, const Matrix<double>& numeric) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

/// A differentiable scalar function: given a graph and the leaf holding the
/// evaluation point, returns the 1x1 output node.
using ScalarBuilder = std::function<Var(Graph<double>&, Var)>;

/// Compares Graph::backward() against central differences at `point`.
/// Returns the maximum relative error over all coordinates.
inline double finite_diff_check(const ScalarBuilder& build, const Matrix<double>& point,
                                double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  }
  Graph<double> g;
  const Var x = g.input(point);
  const Var y = build(g, x);
  if (!std::isfinite(g.value(y)(0, 0))) {
    throw std::domain_error("finite_diff_check: non-finite function value");
  }
  g.backward(y);
  const Matrix<double> analytic = g.grad(x);

  auto eval = [&](const Matrix<double>& p) {
    Graph<double> h;
    const Var xv = h.input(p, false);
    return h.value(build(h, xv))(0, 0);
  };
  return max_relative_error(analytic, numeric_gradient(eval, point, eps));
}

}  // namespace spt
