// SPDX-License-Identifier: Apache-2.0
//
// Error types shared across the lab. Validation errors describe bad input
// (CLI exit code 1); everything else is a runtime failure (exit code 2).

#pragma once

#include <stdexcept>
#include <string>

namespace cpa {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cpa
