#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace skd {

// Bad inputs, shape mismatches, malformed files. CLI maps this to exit 1.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-convergence, non-finite values, failed numeric checks. CLI maps to exit 2.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

using index_t = std::size_t;

}  // namespace skd
