#pragma once

#include <stdexcept>
#include <string>

namespace covidx {

// Coarse failure classes; the CLI maps each one to its own exit code.
enum class ErrorKind { usage, data, numeric, training };

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

}  // namespace covidx
