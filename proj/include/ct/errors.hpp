#pragma once

#include <stdexcept>
#include <string>

namespace ct {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// An operation received tensors whose shapes do not conform to its signature.
struct ShapeError : Error {
  ShapeError(const std::string& op, const std::string& detail)
      : Error("shape mismatch in " + op + ": " + detail) {}
};

// log of a nonpositive probability, or a similar out-of-domain input.
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

// API misuse: tape replayed twice, non-scalar loss, and the like.
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Bad caller-supplied data: token id out of range, n beyond edge count, ...
struct InputError : Error {
  explicit InputError(const std::string& msg) : Error(msg) {}
};

struct PatchingError : Error {
  explicit PatchingError(const std::string& msg) : Error(msg) {}
};

struct TrainingError : Error {
  TrainingError(const std::string& msg, int step)
      : Error(msg + " (step " + std::to_string(step) + ")"), step(step) {}
  int step;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct SpectralEstimateError : Error {
  explicit SpectralEstimateError(const std::string& msg) : Error(msg) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

struct DegenerateBaselineError : Error {
  explicit DegenerateBaselineError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace ct
