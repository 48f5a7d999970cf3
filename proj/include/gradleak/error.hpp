// Copyright 2026 The gradleak Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace gradleak {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared in a tensor while finite checks were enabled.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or descriptor (bad JSON, missing field, bad range).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The defense has no density (Dirac conditional); use the analytic route.
class DegenerateConditional : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradleak
