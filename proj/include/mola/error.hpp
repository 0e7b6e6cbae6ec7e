#pragma once

#include <stdexcept>
#include <string>

namespace mola {

/// Broad failure category; the CLI maps it onto its exit code.
enum class ErrorCategory {
  config,     // bad input, mismatched shapes, invalid settings
  numerical,  // factorization or variance failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  [[nodiscard]] ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define MOLA_DEFINE_ERROR(Name, Category)                      \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& what)                     \
        : Error(ErrorCategory::Category, #Name ": " + what) {} \
  }

MOLA_DEFINE_ERROR(DimensionMismatch, config);
MOLA_DEFINE_ERROR(ConfigMismatch, config);
MOLA_DEFINE_ERROR(InvalidConfig, config);
MOLA_DEFINE_ERROR(InvalidPrior, config);
MOLA_DEFINE_ERROR(MissingLabels, config);
MOLA_DEFINE_ERROR(EmptyInput, config);
MOLA_DEFINE_ERROR(EmptyValidation, config);
MOLA_DEFINE_ERROR(UnsupportedDim, config);
MOLA_DEFINE_ERROR(BiasedNetwork, config);
MOLA_DEFINE_ERROR(NotSymmetric, numerical);
MOLA_DEFINE_ERROR(NotPositiveDefinite, numerical);
MOLA_DEFINE_ERROR(NegativeVariance, numerical);
MOLA_DEFINE_ERROR(SingularCovariance, numerical);

#undef MOLA_DEFINE_ERROR

}  // namespace mola
