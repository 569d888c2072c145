#ifndef TDSA_ERROR_HPP_
#define TDSA_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace tdsa {

// Shapes that do not line up (channel counts, spatial sizes, data length).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition (label range, non-scalar root, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN or Inf showed up where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tdsa

#endif  // TDSA_ERROR_HPP_
