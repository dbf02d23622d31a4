// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace clipsvd {

/// Base of every error the library throws. `kind()` is a stable, machine-parsable
/// class name; the CLI maps it to a distinct exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape_error", what) {}
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, double residual)
      : Error("numeric_error", what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input_error", what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage_error", what) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error("schema_error", what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format_error", what) {}
};

class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& what) : Error("checksum_error", what) {}
};

class MissingFileError : public Error {
 public:
  explicit MissingFileError(const std::string& what) : Error("missing_file", what) {}
};

}  // namespace clipsvd
