#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace eshift {

// Base for every error raised by the library. Command-line front ends map
// the concrete subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The filesystem refused us: missing path, short read, failed rename.
class IoError : public Error {
 public:
  using Error::Error;
};

// A named entry (tensor, report field) was requested but is not there.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Bytes on disk do not form a valid container. Carries the byte offset at
// which parsing gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Well-formed input whose contents violate a numeric or semantic contract
// (non-finite values, single-class labels, shape mismatches).
class DataError : public Error {
 public:
  using Error::Error;
};

// An iterative kernel did not reach its tolerance within the iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace eshift
