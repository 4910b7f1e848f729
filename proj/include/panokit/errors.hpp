#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace panokit {

/// Shape or index disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation that needs at least one foreground pixel received none.
class EmptyMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProjectionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents. `offset()` is the byte position where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Invalid run configuration or command-line input.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class BankError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace panokit
