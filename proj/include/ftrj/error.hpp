#pragma once

#include <stdexcept>
#include <string>

namespace ftrj {

// Failure classes map onto distinct CLI exit codes.
enum class ErrorKind { invalid_argument, config, data, training, evaluation };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::training: return 4;
    case ErrorKind::evaluation: return 5;
    case ErrorKind::invalid_argument: return 6;
  }
  return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, const std::string& what,
                    ErrorKind kind = ErrorKind::invalid_argument) {
  if (!cond) throw Error(kind, what);
}

}  // namespace ftrj
