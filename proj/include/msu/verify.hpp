// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace msu {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  /// Worst observed error (or other measured quantity) and its bound.
  double measured = 0.0;
  double bound = 0.0;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  /// Random trials per gradient-checked op or block.
  int trials = 20;
  std::uint64_t seed = 2024;
  /// Called after each check (progress reporting).
  std::function<void(const CheckResult&)> on_result;
};

std::vector<CheckResult> run_gradcheck_suite(const VerifyOptions& opts = {});
std::vector<CheckResult> run_oracle_suite(const VerifyOptions& opts = {});

/// Subset of the gradcheck suite: the named checks only.
std::vector<CheckResult> run_gradcheck(const std::vector<std::string>& names, const VerifyOptions& opts = {});
std::vector<std::string> gradcheck_names();
std::vector<CheckResult> run_oracles(const std::vector<std::string>& names, const VerifyOptions& opts = {});
std::vector<std::string> oracle_names();

nlohmann::json verify_summary(const std::vector<CheckResult>& results);

// Reference implementations shared by the suites and the test programs.
namespace oracle {

/// Step-by-step S6 recurrence on plain arrays. u, delta: [B*C*L]; A: [C*N];
/// Bm, Cm: [B*N*L]; D: [C]. Returns y [B*C*L].
std::vector<double> selective_scan(const std::vector<double>& u, const std::vector<double>& delta,
                                   const std::vector<double>& A, const std::vector<double>& Bm,
                                   const std::vector<double>& Cm, const std::vector<double>& D, std::int64_t b,
                                   std::int64_t c, std::int64_t l, std::int64_t n);

struct Counts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Per-pixel loop over both label arrays, one class at a time.
std::vector<Counts> confusion(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                              std::int64_t k);

}  // namespace oracle

}  // namespace msu
