// Exception hierarchy for the library; every thrown error derives from
// gpdd::Error so callers can catch one base type.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gpdd {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& msg) : Error("dimension mismatch: " + msg) {}
};

struct NotPositiveDefinite : Error {
  explicit NotPositiveDefinite(const std::string& msg)
      : Error("matrix not positive definite: " + msg) {}
};

struct NonScalarOutput : Error {
  explicit NonScalarOutput(const std::string& msg)
      : Error("backward requires a 1x1 output: " + msg) {}
};

struct ParseError : Error {
  std::size_t line;
  ParseError(std::size_t line_, const std::string& msg)
      : Error("parse error at line " + std::to_string(line_) + ": " + msg), line(line_) {}
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& msg) : Error("schema error: " + msg) {}
};

struct InvalidConfig : Error {
  explicit InvalidConfig(const std::string& msg) : Error("invalid config: " + msg) {}
};

struct CapExceeded : Error {
  explicit CapExceeded(const std::string& msg) : Error("row cap exceeded: " + msg) {}
};

struct EmptyBatch : Error {
  explicit EmptyBatch(const std::string& msg) : Error("empty batch: " + msg) {}
};

struct UnknownBatchKind : Error {
  explicit UnknownBatchKind(const std::string& msg) : Error("unknown batch kind: " + msg) {}
};

struct OutOfBox : Error {
  explicit OutOfBox(const std::string& msg) : Error("point outside function box: " + msg) {}
};

struct MissingGradients : Error {
  explicit MissingGradients(const std::string& msg) : Error("missing gradients: " + msg) {}
};

struct InvalidK : Error {
  explicit InvalidK(const std::string& msg) : Error("invalid subspace dimension: " + msg) {}
};

struct UnknownFunction : Error {
  explicit UnknownFunction(const std::string& msg) : Error("unknown test function: " + msg) {}
};

}  // namespace gpdd
