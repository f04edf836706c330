/*
 * Copyright (c) 2026 The trunet3d Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
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

namespace trunet {

// Every error raised by the core derives from Error. The C API maps each
// subclass onto one trunet_status code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model/train/phantom configuration or incompatible tensor shapes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse (non-scalar loss, mismatched metric inputs, empty split ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Data contents violate a contract (label out of range, empty ROI ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace trunet
