#pragma once

#include <stdexcept>
#include <string>

namespace bilm {

// Runtime failure inside a pipeline stage (I/O, non-finite loss, ...).
// The CLI maps this to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input, schema violation or a broken precondition.
// The CLI maps this to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace bilm
