/* Copyright 2026 The seqformer authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace seqformer {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape / dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (bad index, bad range, bad enum, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (non-scalar loss, double backward, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf detected at a checkpoint.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// File format or filesystem problem; message carries file and offset.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Problem in a run-config file or CLI usage. `line` is 0 when unknown.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, int line_no = 0)
      : Error(msg), line(line_no) {}
  int line;
};

}  // namespace seqformer
