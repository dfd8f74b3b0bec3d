#pragma once

#include <stdexcept>
#include <string>

namespace shrinkforge {

enum class ErrorKind {
  Config,           // invalid configuration, spec, or argument values
  Shape,            // tensor dimension mismatch
  Compat,           // incompatible artifacts (teacher vs. student, class counts)
  Numeric,          // NaN/Inf encountered where finiteness is required
  Io,               // filesystem failure
  BadMagic,         // unrecognized file magic
  VersionMismatch,  // checkpoint format version not supported
  Truncated,        // payload shorter than its header promises
  Inconsistent,     // header and payload disagree
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool ok, ErrorKind kind, const std::string& message) {
  if (!ok) fail(kind, message);
}

}  // namespace shrinkforge
