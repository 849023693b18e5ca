#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace arcd {

/// Base for every error raised by the library. `kind()` is a stable,
/// machine-readable tag used by the CLI's one-line error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Shape mismatch. The message names the offending axis.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

/// NaN / Inf where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

/// Malformed input file. `offset()` is a byte offset or a 1-based line
/// number depending on the format (see `unit()`).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset, const char* unit = "byte")
      : Error("parse", what + " (at " + unit + " " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

/// Checkpoint contents do not match the model being loaded.
class MismatchError : public Error {
 public:
  explicit MismatchError(const std::string& what) : Error("mismatch", what) {}
};

}  // namespace arcd
