#pragma once

#include <stdexcept>
#include <string>

namespace gseg {

enum class ErrorKind {
  invalid_argument,
  shape,
  io,
  format,
  numeric,
};

// Every failure inside the library is reported as a gseg::Error; the C API
// maps the kind onto a status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace gseg
