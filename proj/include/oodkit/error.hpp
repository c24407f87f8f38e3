// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace oodkit {

enum class ErrorCode {
  io,
  bad_magic,
  unsupported_version,
  truncated,
  trailing_data,
  bad_shape,
  bad_dtype,
  bad_name,
  duplicate_name,
  oversized,
  non_finite,
  missing_entry,
  dimension_mismatch,
  invalid_argument,
  missing_labels,
  singular_covariance,
  empty_class,
  zero_residual,
  unfitted,
  divergence,
  parse,
  unknown_image,
  duplicate_record,
  usage,
};

// Broad failure classes; the CLI maps them to exit codes 1, 2 and 3.
enum class ErrorCategory { usage, data, numerical };

inline const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::io: return "io error";
    case ErrorCode::bad_magic: return "bad magic";
    case ErrorCode::unsupported_version: return "unsupported version";
    case ErrorCode::truncated: return "truncated payload";
    case ErrorCode::trailing_data: return "trailing data";
    case ErrorCode::bad_shape: return "bad shape";
    case ErrorCode::bad_dtype: return "bad dtype";
    case ErrorCode::bad_name: return "bad entry name";
    case ErrorCode::duplicate_name: return "duplicate entry name";
    case ErrorCode::oversized: return "oversized tensor";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::missing_entry: return "missing entry";
    case ErrorCode::dimension_mismatch: return "dimension mismatch";
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::missing_labels: return "missing labels";
    case ErrorCode::singular_covariance: return "singular covariance";
    case ErrorCode::empty_class: return "empty class";
    case ErrorCode::zero_residual: return "zero residual";
    case ErrorCode::unfitted: return "statistics not fitted";
    case ErrorCode::divergence: return "training diverged";
    case ErrorCode::parse: return "parse error";
    case ErrorCode::unknown_image: return "unknown image id";
    case ErrorCode::duplicate_record: return "duplicate record";
    case ErrorCode::usage: return "usage error";
  }
  return "unknown error";
}

inline ErrorCategory category_of(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::usage:
    case ErrorCode::invalid_argument:
      return ErrorCategory::usage;
    case ErrorCode::singular_covariance:
    case ErrorCode::empty_class:
    case ErrorCode::zero_residual:
    case ErrorCode::divergence:
      return ErrorCategory::numerical;
    default:
      return ErrorCategory::data;
  }
}

/// Every failure raised by the library. `index()` carries the offending
/// class, entry or epoch when the failure is tied to one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace oodkit
