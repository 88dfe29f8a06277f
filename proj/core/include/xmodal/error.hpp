#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace xmodal {

enum class ErrorCode {
  Io,
  MalformedHeader,
  DimensionMismatch,
  NonFiniteValue,
  ZeroVector,
  ShapeMismatch,
  MissingSlot,
  EmptyRecordSet,
  SampleTooLarge,
  NonPositiveTemperature,
  BatchTooSmall,
  NonFiniteLoss,
  MissingLabels,
  SingleClass,
  KTooLarge,
  DimensionTooSmall,
  InvalidConfig,
};

std::string_view error_name(ErrorCode code) noexcept;

/// Domain error raised by every module. what() always starts with the
/// error name ("NonFiniteValue(row=7): ...") so callers and the CLI can
/// report the kind without inspecting the code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail,
        std::optional<std::size_t> index = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace xmodal
