#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ekrmle {

/// How an error should surface at the process boundary. Validation errors
/// (bad shapes, bad inputs, violated preconditions) map to exit code 1;
/// numerical failures (divergence, instability, factorization breakdown)
/// map to exit code 2.
enum class ErrorCategory { Validation, Numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

/// Dimension mismatch between operands (operator/vector/matrix shapes).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorCategory::Validation, what) {}
};

/// A documented precondition does not hold (non-SPD covariance, unstable
/// dynamics, wrong perturbation variant, misaligned observation times, ...).
class PreconditionError : public Error {
 public:
  explicit PreconditionError(const std::string& what)
      : Error(ErrorCategory::Validation, what) {}
};

/// Operation is not defined for this operator representation, e.g. a closed
/// form was requested for a black-box map that cannot be materialized.
class UnsupportedOperatorError : public Error {
 public:
  explicit UnsupportedOperatorError(const std::string& what)
      : Error(ErrorCategory::Validation, what) {}
};

/// A reduction order exceeds the numerically usable rank.
class RankError : public Error {
 public:
  RankError(const std::string& what, std::int64_t requested, std::int64_t usable)
      : Error(ErrorCategory::Validation, what),
        requested_(requested),
        usable_(usable) {}
  std::int64_t requested() const noexcept { return requested_; }
  std::int64_t usable() const noexcept { return usable_; }

 private:
  std::int64_t requested_;
  std::int64_t usable_;
};

/// File or stream level failure (missing file, malformed header, bad field).
class IoError : public Error {
 public:
  explicit IoError(const std::string& what)
      : Error(ErrorCategory::Validation, what) {}
};

/// A factorization or solve failed in a way that indicates a numerical
/// breakdown rather than a caller mistake.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorCategory::Numerical, what) {}
};

/// Non-finite values appeared while integrating dynamics, or an explicit
/// scheme was detected as growing. Carries the failing step and, when the
/// cure is a smaller step size, a suggestion.
class InstabilityError : public NumericalError {
 public:
  InstabilityError(const std::string& what, std::int64_t step,
                   double suggested_dt = 0.0)
      : NumericalError(what), step_(step), suggested_dt_(suggested_dt) {}
  std::int64_t step() const noexcept { return step_; }
  double suggested_dt() const noexcept { return suggested_dt_; }

 private:
  std::int64_t step_;
  double suggested_dt_;
};

}  // namespace ekrmle
