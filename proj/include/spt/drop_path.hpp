// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

#include "spt/numcore/array.hpp"
#include "spt/random.hpp"

namespace spt {

/// Multiplier for one residual branch of one sample under stochastic depth:
/// 0 when the branch is dropped, 1/(1-rate) when kept, 1 outside training.
inline double drop_path_factor(double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("drop path rate must be in [0, 1)");
  if (!training || rate == 0.0) return 1.0;
  const bool keep = uniform_unit(rng) >= rate;
  return keep ? 1.0 / (1.0 - rate) : 0.0;
}

/// Applies stochastic depth to a whole residual-branch value.
template <class T>
Matrix<T> apply_drop_path(const Matrix<T>& branch, double rate, bool training, Rng& rng) {
  const double f = drop_path_factor(rate, training, rng);
  if (f == 1.0) return branch;
  return branch * static_cast<T>(f);
}

}  // namespace spt
