#pragma once

#include <stdexcept>
#include <string>

namespace hap {

// Base of every error the library raises. The CLI maps the subclasses onto
// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, divergent training, singular factorizations.
class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pruning request that cannot be met under the active constraints.
// constraint() names the one that bound.
class InfeasibleError : public Error {
 public:
  InfeasibleError(std::string constraint, const std::string& what)
      : Error(what), constraint_(std::move(constraint)) {}
  const std::string& constraint() const { return constraint_; }

 private:
  std::string constraint_;
};

// Malformed checkpoint or dataset bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Problem too large for an exact (dense / enumerative) computation.
class CapacityError : public Error {
 public:
  using Error::Error;
};

}  // namespace hap
