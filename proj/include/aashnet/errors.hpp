#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aashnet {

// Input, configuration, or shape problems. The CLI maps these to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arithmetic failures (NaN/Inf, overflow, non-convergence). Exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ContractViolation : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnsupportedPrimitive : public ValidationError {
 public:
  explicit UnsupportedPrimitive(const std::string& name)
      : ValidationError("unsupported primitive: " + name), primitive_(name) {}
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

class NonFiniteValue : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Raised by the trainer; carries the 1-based step at which it happened.
class StepError : public NumericalError {
 public:
  StepError(const std::string& what, std::size_t step)
      : NumericalError(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace aashnet
