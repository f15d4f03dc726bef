#pragma once

#include <stdexcept>
#include <string>

namespace rvos {

/// Failure category; the CLI maps each to a distinct exit code.
enum class ErrorKind { Usage, Data, Numeric, Shape };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::Usage, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::Data, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::Shape, w) {}
};

}  // namespace rvos
