#pragma once

#include <stdexcept>
#include <string>

namespace msmcal {

// Error categories map onto CLI exit codes (data -> 3, numerical -> 4).
enum class ErrorCategory { data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

// Malformed input files, invariant violations, bad formulas, shape mismatches.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

// Rank deficiency, non-convergence, infeasible calibration, degenerate variance.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorCategory::numerical, what) {}
};

inline const char* category_name(ErrorCategory c) {
  return c == ErrorCategory::data ? "data" : "numerical";
}

}  // namespace msmcal
