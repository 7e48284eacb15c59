// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace esslab {

/// Contract violation or malformed input. The message is the stable part of the interface.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training.
class DivergedError : public Error {
 public:
  DivergedError() : Error("diverged") {}
  explicit DivergedError(const std::string& detail) : Error("diverged: " + detail) {}
};

}  // namespace esslab
