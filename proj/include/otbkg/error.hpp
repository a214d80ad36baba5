#pragma once

#include <stdexcept>
#include <string>

namespace otbkg {

// Malformed or inconsistent input: bad files, dimension mismatches, missing
// prerequisites. Maps to CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, constraint violations beyond tolerance, divergent
// training. Maps to CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DataError(what);
}

}  // namespace otbkg
