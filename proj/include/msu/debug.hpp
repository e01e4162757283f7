// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

namespace msu::debug {

/// Corrupts the backward pass of the named op ("conv2d", "linear", ...) by a
/// small relative factor. Used as a mutation canary for the gradient checker.
/// An empty string disables the fault.
void inject_gradient_fault(const std::string& op_name);
const std::string& gradient_fault();

/// Multiplier applied to a gradient of `op_name` (1 unless a fault is armed).
double fault_factor(const char* op_name);

}  // namespace msu::debug
