// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msu/tensor.hpp"

namespace msu {

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  std::vector<double> per_input_errors;
  bool passed = false;
  double tolerance = 0.0;
  /// Non-empty when the check refused to run (e.g. non-deterministic fn).
  std::string note;
  /// Coordinates compared, and the candidate pool they were drawn from.
  std::int64_t coords_checked = 0;
  std::int64_t coords_eligible = 0;
};

struct GradCheckOptions {
  double tol = 1e-4;
  double step = 1e-6;
  /// When positive, coordinates are drawn only among entries whose analytic
  /// gradient is at least this fraction of the largest one. Gradients many
  /// orders below the largest sit under the finite-difference noise floor.
  double min_grad_ratio = 0.0;
  /// Upper bound on perturbed coordinates per input (0 = all). Coordinates
  /// are drawn without replacement with `seed`.
  std::int64_t max_coords_per_input = 0;
  /// Total coordinate budget across all inputs (0 = unlimited).
  std::int64_t max_coords_total = 0;
  std::uint64_t seed = 1234;
};

/// Relative error with a 1e-8 floor on the denominator.
double relative_error(double a, double b);

/// Compares reverse-mode gradients of `fn` against central differences.
///
/// Non-scalar outputs are contracted with a fixed random cotangent so that
/// every Jacobian row contributes. Inputs must be f64 leaves; they are
/// perturbed in place and restored. `fn` is evaluated twice up front and the
/// check refuses to run if the two results differ.
GradReport finite_difference_check(const std::string& op_name,
                                   const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                   std::vector<Tensor> inputs, const GradCheckOptions& opts = {});

}  // namespace msu
