#pragma once

#include <stdexcept>
#include <string>

namespace sparsecoder {

// Domain failures (bad input data, invalid model state). The CLI maps these
// to exit code 1; usage errors are reported by the argument parser instead.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace sparsecoder
