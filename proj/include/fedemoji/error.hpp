// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fedemoji {

/// Raised for contract violations and runtime failures anywhere in the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string &what) : std::runtime_error(what) {}
};

/// Configuration problems (bad keys, out-of-range values). The CLI maps these
/// to exit code 1.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string &what) : Error(what) {}
};

}  // namespace fedemoji
