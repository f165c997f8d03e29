// Copyright 2026 The ser-forge Authors.
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
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace serforge {

// Root of every error raised by the library. Callers that only need to
// distinguish "bad configuration" from "something failed while running"
// can catch ConfigError and Error respectively.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Well-formed input whose content violates a data contract (empty input,
// out-of-range label, unknown session, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Two feature streams whose frame counts are too far apart to fuse.
class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

// Malformed bytes or text in a file we were asked to parse.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what) {}
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::optional<std::size_t> offset() const { return offset_; }

 private:
  std::optional<std::size_t> offset_;
};

// Optimization went wrong: non-finite loss or gradient.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// A forward pass produced a non-finite activation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration. Carries one diagnostic per offending field.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(what), diagnostics_{what} {}
  explicit ConfigError(std::vector<std::string> diagnostics)
      : Error(join(diagnostics)), diagnostics_(std::move(diagnostics)) {}

  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& item : items) {
      if (!out.empty()) out += "; ";
      out += item;
    }
    return out;
  }

  std::vector<std::string> diagnostics_;
};

}  // namespace serforge
