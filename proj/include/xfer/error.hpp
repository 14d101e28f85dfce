#pragma once

#include <stdexcept>
#include <string>

namespace xfer {

// Bad user input: malformed files, out-of-range parameters.  The CLI maps
// these to exit code 1; everything else (std::runtime_error) maps to 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace xfer
