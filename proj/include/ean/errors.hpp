#pragma once

#include <stdexcept>
#include <string>

namespace ean {

// Shape / axis violations (mismatched matmul extents, bad axis index, ...).
class DimError : public std::runtime_error {
 public:
  explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Caller broke a documented precondition (non-scalar backward, empty point set, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Invalid or inconsistent configuration values.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Dataset file failed its manifest hash or structural validation.
class CorruptDatasetError : public std::runtime_error {
 public:
  explicit CorruptDatasetError(const std::string& msg)
      : std::runtime_error("corrupt dataset: " + msg) {}
};

// NaN/Inf encountered where the pipeline requires finite values.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(const std::string& msg) : std::runtime_error("numeric fault: " + msg) {}
};

class DegenerateGeometryError : public std::runtime_error {
 public:
  explicit DegenerateGeometryError(const std::string& msg)
      : std::runtime_error("degenerate geometry: " + msg) {}
};

}  // namespace ean
