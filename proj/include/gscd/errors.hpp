#pragma once

#include <stdexcept>
#include <string>

namespace gscd {

// Each category maps to a distinct process exit code in the CLI.
enum class ErrorCategory : int {
  Usage = 2,
  Config = 3,
  Io = 4,
  Format = 5,
  Shape = 6,
  Numeric = 7,
  Autodiff = 8,
  Check = 9,
  Value = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::Shape, what) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};
struct AutodiffError : Error {
  explicit AutodiffError(const std::string& what) : Error(ErrorCategory::Autodiff, what) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorCategory::Format, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& what) : Error(ErrorCategory::Value, what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

}  // namespace gscd
