#pragma once

#include <stdexcept>
#include <string>

namespace qtk {

// Each kind maps to a distinct CLI exit code.
enum class ErrorKind {
  invalid_argument = 2,
  missing_file = 3,
  malformed_input = 4,
  shape_mismatch = 5,
  overflow_risk = 6,
  uncalibrated = 7,
  constraint_violation = 8,
  unsupported = 9,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::missing_file: return "missing_file";
    case ErrorKind::malformed_input: return "malformed_input";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::overflow_risk: return "overflow_risk";
    case ErrorKind::uncalibrated: return "uncalibrated";
    case ErrorKind::constraint_violation: return "constraint_violation";
    case ErrorKind::unsupported: return "unsupported";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace qtk
