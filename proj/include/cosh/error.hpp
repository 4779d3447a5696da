#pragma once

#include <stdexcept>
#include <string>

namespace coshdit {

// Base for everything thrown by the library. The CLI maps these to
// single-line "ERROR <stage>: message" output with a nonzero exit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not match an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A computation produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input is structurally valid but degenerate (all-masked loss, zero-length
// bone, near-parallel 6D columns, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Input violates a documented precondition (non-orthonormal rotation, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A categorical distribution has empty support where mass is required.
class SupportError : public Error {
 public:
  using Error::Error;
};

// Transition-schedule parameters produce an invalid matrix family.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

// Sampling failed after the allowed number of retries.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// A pipeline-level calling contract was broken (missing checkpoint,
// missing mid-sequence motion frames, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// File or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Bad or unknown configuration key/value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace coshdit
