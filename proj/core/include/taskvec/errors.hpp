#pragma once

#include <stdexcept>
#include <string>

namespace taskvec {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or layouts that do not line up.
class LayoutError : public Error {
 public:
  using Error::Error;
};

// Arguments that are well-formed but violate a precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses, diverging optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Requests that exceed a hard size guard (dense Hessians, full Fisher).
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Malformed files: IDX, CSV, pool manifests.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace taskvec
