#pragma once

#include <stdexcept>
#include <string>

namespace smartjm {

// Error hierarchy shared by every module. Callers that only care about
// "something failed" can catch smartjm::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DecompositionError : public Error {
 public:
  using Error::Error;
};

// Non-finite or out-of-range intermediate values (hazard overflow, total
// underflow of a likelihood mixture).
class EvaluationError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

class EstimationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

#define SMARTJM_REQUIRE(cond, msg)                 \
  do {                                             \
    if (!(cond)) throw ::smartjm::PreconditionError(msg); \
  } while (false)

}  // namespace smartjm
