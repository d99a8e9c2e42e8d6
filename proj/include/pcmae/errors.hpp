// Copyright (c) 2026 The pcmae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pcmae {

/// Violated precondition or internal invariant (programming error).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Operand shapes are incompatible.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A masked_softmax row has no allowed entry.
class InvalidMaskError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid user configuration (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `position` is a byte offset or a 1-based line
/// number depending on the format.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Non-finite values during training (maps to CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pcmae
