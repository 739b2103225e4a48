// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef LISA_ERRORS_HPP
#define LISA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace lisa {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numeric operation left its domain (log of non-positive, overflow, NaN).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Model, sharing or training configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller-provided data is malformed (token out of range, negative probability).
class InputError : public Error {
 public:
  using Error::Error;
};

/// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A fixed-capacity structure would overflow (KV cache past max_len).
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// An internal guarantee was broken; always a bug or corrupted state.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace lisa

#endif  // LISA_ERRORS_HPP
