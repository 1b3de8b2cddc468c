#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace muffin {

// Failure categories. The CLI maps them to message prefixes and exit codes.
enum class ErrorKind {
  Config,
  Data,
  Io,
  Numeric,
  Shape,
  Index,
  State,
  Contract,
};

std::string_view error_prefix(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_prefix(kind)) + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorKind::Config, m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error(ErrorKind::Data, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorKind::Io, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error(ErrorKind::Shape, m) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error(ErrorKind::Index, m) {}
};
struct StateError : Error {
  explicit StateError(const std::string& m) : Error(ErrorKind::State, m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error(ErrorKind::Contract, m) {}
};

}  // namespace muffin
