#pragma once

#include <stdexcept>
#include <string>

namespace dreamrec {

/// Violated precondition on an API call (bad shape, out-of-range index, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reverse pass reached an operation that has no derivative.
class UnsupportedOpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss function returned different values for identical inputs.
class DeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or incompatible on-disk container.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input parsed fine but nothing usable survived (no records, everything filtered).
class EmptyInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dreamrec
