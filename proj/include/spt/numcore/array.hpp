// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>

namespace spt {

using Index = Eigen::Index;

/// Dense row-major matrix. Every tensor in the model is two-dimensional:
/// vectors are 1xN rows and scalars are 1x1.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
std::string shape_str(const Matrix<T>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

template <class T>
void require_finite(const Matrix<T>& m, const std::string& what) {
  if (!m.allFinite()) {
    throw std::domain_error(what + ": non-finite value in " + shape_str(m));
  }
}

}  // namespace spt
