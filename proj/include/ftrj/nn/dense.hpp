#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "ftrj/error.hpp"

namespace ftrj {

// Row-major so a batch is one sample per row.
using DenseMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline DenseMatrix as_row(const Vector& v) {
  return DenseMatrix(v.transpose());
}

inline Vector row_vector(const DenseMatrix& m, Eigen::Index r) {
  return m.row(r).transpose();
}

inline std::span<double> as_span(DenseMatrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<double> as_span(Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const std::string& what,
                    ErrorKind kind = ErrorKind::invalid_argument) {
  if (!m.allFinite()) fail(kind, what + ": non-finite value");
}

}  // namespace ftrj
