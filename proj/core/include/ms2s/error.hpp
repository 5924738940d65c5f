#pragma once

#include <stdexcept>
#include <string>

namespace ms2s {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension disagreement between operands.
class DimError : public Error {
 public:
  using Error::Error;
};

// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (WAV, RTTM, checkpoints, caches).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied data that cannot be processed (too short, too few points).
class InputError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a forward op, or non-finite gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

// API misuse (backward on a non-scalar, missing tape, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace ms2s
