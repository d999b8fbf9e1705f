// Copyright (c) 2026 The mcspex Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MCSPEX_COMMON_HPP_
#define MCSPEX_COMMON_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mcspex {

// Error taxonomy. The CLI maps UsageError/ConfigError/FormatError to exit
// code 2 and everything else to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not match an operation's contract.
struct DimensionError : Error {
  using Error::Error;
};

// A forward value, gradient or optimizer input is NaN/Inf.
struct NumericError : Error {
  using Error::Error;
};

// Invalid model or run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed external data (WAV file, manifest, checkpoint).
struct FormatError : Error {
  using Error::Error;
};

// API or command line misuse.
struct UsageError : Error {
  using Error::Error;
};

// Input that is structurally valid but unusable (e.g. all-zero signal).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Too many unreadable records in a dataset.
struct DataError : Error {
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

template <typename T>
bool all_finite(const T* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) return false;
  }
  return true;
}

}  // namespace mcspex

#endif  // MCSPEX_COMMON_HPP_
