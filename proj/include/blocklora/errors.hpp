#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace blocklora {

// Every failure raised by the library derives from Error so callers can
// catch broadly and map to exit codes by concrete type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain (probabilities, erasure rates,
// non-finite values).
class DomainError : public Error {
 public:
  using Error::Error;
};

class AllocationError : public Error {
 public:
  using Error::Error;
};

// Merge coefficients violate the convex-combination constraint.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

// Adapters or models that cannot be combined (layer sets, shapes, base
// signatures differ).
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ArityError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// File does not look like the expected container (magic, type tag, header).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Container is structurally broken (offsets, truncation).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// Container parses but its content violates a model invariant.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace blocklora
