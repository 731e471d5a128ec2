#pragma once

#include <stdexcept>
#include <string>

namespace minpart {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class CapExceeded : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownExampleId : public Error {
 public:
  using Error::Error;
};

class TapeMismatch : public Error {
 public:
  using Error::Error;
};

class WrongKind : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NotNSD : public Error {
 public:
  using Error::Error;
};

/// Parse failures carry the offending line number in the message.
class ParseError : public Error {
 public:
  using Error::Error;
};

class LabelOutOfRange : public Error {
 public:
  using Error::Error;
};

class NotAPermutation : public Error {
 public:
  using Error::Error;
};

class SolverFailure : public Error {
 public:
  using Error::Error;
};

class NotUnary : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised by the NaN/Inf guard in the training loop.
class Divergence : public Error {
 public:
  using Error::Error;
};

}  // namespace minpart
