#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rmkd {

// Error taxonomy. The CLI maps each family onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an op's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (even kernel width, odd d_model, bad n_fft...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Out-of-range ids and other malformed inputs.
class InputError : public Error {
 public:
  using Error::Error;
};

// Predicted and target mel grids have different frame counts.
class AlignmentError : public InputError {
 public:
  using InputError::InputError;
};

// Contract violations on the autodiff graph.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during optimization.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// The frozen reference model changed during a fine-tuning session.
class ReferenceMutationError : public Error {
 public:
  using Error::Error;
};

}  // namespace rmkd
