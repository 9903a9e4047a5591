#pragma once

#include <stdexcept>
#include <string>

namespace kurtail {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or lengths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (bit-width, non power of two, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Singular systems, rank deficiency, non-finite values, failed factorizations.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Pipeline failure tagged with the stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace kurtail
