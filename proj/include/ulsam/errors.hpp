#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ulsam {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent shapes, extents or configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A ULSAM position directive that cannot be applied to the graph.
class DirectiveError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Operation invoked in the wrong state, e.g. backward before forward.
class StateError : public Error {
 public:
  using Error::Error;
};

class IngestError : public Error {
 public:
  IngestError(const std::string& what, std::uint64_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace ulsam
