#pragma once

#include <stdexcept>
#include <string>

namespace pairmatch {

// Malformed input: bad files, schema violations, invalid configs,
// preconditions the caller could have checked.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The fixed-effect design cannot be estimated (collinear columns, a missing arm).
class RankDeficiencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pairmatch
