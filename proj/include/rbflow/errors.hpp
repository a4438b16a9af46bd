#pragma once

#include <stdexcept>
#include <string>

namespace rbflow {

/// Input that violates a documented precondition (bad rotation matrix, broken
/// rigidity, schema violation, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative method failed to reach its tolerance.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Malformed persisted file. `kind` distinguishes header, length and value
/// problems so callers can react to each separately.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { header, version, length, quaternion_norm, value };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace rbflow
