// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ccoe {

/// Coarse error classes. The CLI maps these onto process exit codes.
enum class ErrorCategory {
  usage,       // exit 1
  config,      // exit 2
  data,        // exit 2
  numeric,     // exit 3
  corruption,  // exit 4
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define CCOE_DECLARE_ERROR(Name, Category)                           \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(Category, what) {} \
  }

CCOE_DECLARE_ERROR(DimensionError, ErrorCategory::config);
CCOE_DECLARE_ERROR(ConfigError, ErrorCategory::config);
CCOE_DECLARE_ERROR(RoutingError, ErrorCategory::config);
CCOE_DECLARE_ERROR(BudgetError, ErrorCategory::config);
CCOE_DECLARE_ERROR(FrozenModelError, ErrorCategory::config);
CCOE_DECLARE_ERROR(SequenceLengthError, ErrorCategory::data);
CCOE_DECLARE_ERROR(GatingError, ErrorCategory::data);
CCOE_DECLARE_ERROR(LookupError, ErrorCategory::data);
CCOE_DECLARE_ERROR(DatasetError, ErrorCategory::data);
CCOE_DECLARE_ERROR(WorkloadError, ErrorCategory::data);
CCOE_DECLARE_ERROR(NumericError, ErrorCategory::numeric);
CCOE_DECLARE_ERROR(CorruptionError, ErrorCategory::corruption);
CCOE_DECLARE_ERROR(VersionError, ErrorCategory::corruption);

#undef CCOE_DECLARE_ERROR

/// Raised when a training loss becomes non-finite. The parameters being
/// trained are restored to the last finite step before this is thrown.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long last_good_step)
      : Error(ErrorCategory::numeric, what), last_good_step_(last_good_step) {}

  long last_good_step() const noexcept { return last_good_step_; }

 private:
  long last_good_step_;
};

inline int exit_code(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::usage:
      return 1;
    case ErrorCategory::config:
    case ErrorCategory::data:
      return 2;
    case ErrorCategory::numeric:
      return 3;
    case ErrorCategory::corruption:
      return 4;
  }
  return 2;
}

}  // namespace ccoe
