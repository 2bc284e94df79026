#pragma once

#include <stdexcept>
#include <string>

namespace prima {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible (length mismatch, empty axis, N = 0).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Metadata does not conform to its schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; the message carries the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A precondition on the caller's input was violated.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Training was aborted (divergence, stage failure).
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

}  // namespace prima
