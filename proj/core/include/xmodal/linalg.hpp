#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace xmodal {

/// Row-major dense matrix; one sample per row everywhere in the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Pairwise (tree) summation. The reduction order depends only on the length,
/// so batch losses are bit-reproducible.
double pairwise_sum(std::span<const double> values) noexcept;

inline double pairwise_sum(const std::vector<double>& values) noexcept {
  return pairwise_sum(std::span<const double>(values.data(), values.size()));
}

bool all_finite(const Matrix& m) noexcept;

/// Same shape and bit-identical entries.
bool identical(const Matrix& a, const Matrix& b) noexcept;

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(const Eigen::Ref<const RowVector>& row) noexcept;

}  // namespace xmodal
