#pragma once

#include <stdexcept>
#include <string>

namespace wn {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape, rank or axis mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Batch or sample count too small for the requested statistic.
struct BatchSizeError : DimensionError {
  using DimensionError::DimensionError;
};

// Invalid numeric input: non-finite data, out-of-range label, negative scale.
struct ValueError : Error {
  using Error::Error;
};

// A direction vector with (near-)zero norm cannot be normalized.
struct DegenerateDirectionError : ValueError {
  using ValueError::ValueError;
};

// Scale parameter outside the domain of the active parameterization,
// e.g. g <= 0 while the log-scale mode is on.
struct InvalidScaleError : ValueError {
  using ValueError::ValueError;
};

// An operation was called outside its documented protocol (stale caches,
// eval-mode caches passed to a backward pass, non-orthogonal updates, ...).
struct ContractError : Error {
  using Error::Error;
};

// Malformed or mutually inconsistent input files.
struct DataError : Error {
  enum class Kind { format, consistency, length };

  DataError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
  Kind kind;
};

// Invalid experiment configuration or model specification.
struct ConfigError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace wn
