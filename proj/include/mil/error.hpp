#pragma once

#include <stdexcept>
#include <string>

namespace mil {

/// Violated precondition or malformed input (CLI exit code 2).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem or file-format failure (CLI exit code 3).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mil
