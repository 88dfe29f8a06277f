#include "xmodal/error.hpp"
#include "xmodal/linalg.hpp"

#include <cmath>
#include <cstring>

namespace xmodal {

std::string_view error_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Io: return "IoError";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingSlot: return "MissingSlot";
    case ErrorCode::EmptyRecordSet: return "EmptyRecordSet";
    case ErrorCode::SampleTooLarge: return "SampleTooLarge";
    case ErrorCode::NonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::DimensionTooSmall: return "DimensionTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Error";
}

namespace {

std::string format_error(ErrorCode code, const std::string& detail,
                         std::optional<std::size_t> index) {
  std::string out(error_name(code));
  if (index) {
    out += "(row=" + std::to_string(*index) + ")";
  }
  if (!detail.empty()) {
    out += ": " + detail;
  }
  return out;
}

double pairwise_sum_impl(const double* values, std::size_t n) noexcept {
  if (n <= 8) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += values[i];
    return acc;
  }
  const std::size_t half = n / 2;
  return pairwise_sum_impl(values, half) + pairwise_sum_impl(values + half, n - half);
}

}  // namespace

Error::Error(ErrorCode code, const std::string& detail, std::optional<std::size_t> index)
    : std::runtime_error(format_error(code, detail, index)), code_(code), index_(index) {}

double pairwise_sum(std::span<const double> values) noexcept {
  return pairwise_sum_impl(values.data(), values.size());
}

bool all_finite(const Matrix& m) noexcept {
  return m.allFinite();
}

bool identical(const Matrix& a, const Matrix& b) noexcept {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

std::size_t argmax(const Eigen::Ref<const RowVector>& row) noexcept {
  std::size_t best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(j);
  }
  return best;
}

}  // namespace xmodal
