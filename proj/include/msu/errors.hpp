// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace msu {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch, violated precondition or misuse of the API.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (bad group count, odd channels, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input tensor or image with unsupported geometry.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset content: orphan files, bad labels, size mismatch.
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Raised when a non-finite value appears where it must not.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace msu
