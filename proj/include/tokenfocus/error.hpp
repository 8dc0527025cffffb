#pragma once

#include <stdexcept>
#include <string>

namespace tokenfocus {

// Violated precondition or malformed input. Maps to CLI exit status 1.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite value encountered in numeric code. Maps to exit status 1.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Unreadable or unwritable file. Maps to exit status 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tokenfocus
