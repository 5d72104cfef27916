#pragma once

#include <stdexcept>
#include <string>

namespace msholo {

// Base of every exception thrown by the library. The `kind()` tag is what the
// command-line layer maps onto exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class SizingError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "sizing"; }
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_mismatch"; }
};

class DomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "domain"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

class DivergenceError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "divergence"; }
};

}  // namespace msholo
