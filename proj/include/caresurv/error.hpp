#pragma once

#include <stdexcept>
#include <string>

namespace caresurv {

// Input failed a documented precondition (range, schema, shape).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An iterative fit stopped without meeting its convergence criterion.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Persisted data could not be read back (truncation, checksum, version).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace caresurv
