// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "msu/ops.hpp"

namespace msu {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

GradReport finite_difference_check(const std::string& op_name,
                                   const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                   std::vector<Tensor> inputs, const GradCheckOptions& opts) {
  GradReport report;
  report.op_name = op_name;

  report.tolerance = opts.tol;
  for (const auto& t : inputs) {
    if (t.dtype() != DType::f64) {
      report.note = "inputs must be f64";
      return report;
    }
    if (!t.is_leaf()) {
      report.note = "inputs must be leaf tensors";
      return report;
    }
  }

  Tensor probe;
  Tensor cotangent;
  {
    NoGradGuard ng;
    probe = fn(inputs);
    Tensor again = fn(inputs);
    if (probe.to_vector() != again.to_vector()) {
      report.note = "function is not deterministic; pin its seed before checking";
      return report;
    }
    std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> c(static_cast<std::size_t>(probe.numel()));
    for (auto& v : c) v = u(rng);
    cotangent = Tensor::from_vector(probe.shape(), c, DType::f64);
  }

  // <c, up - down>, differenced per element so untouched outputs cancel exactly.
  auto contract_difference = [&](const Tensor& up, const Tensor& down) {
    auto u = up.data<double>();
    auto d = down.data<double>();
    auto c = cotangent.data<double>();
    double acc = 0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] - d[i]) * c[i];
    return acc;
  };

  std::vector<bool> saved_flags;
  for (auto& t : inputs) {
    saved_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
  }
  std::vector<Tensor> analytic;
  {
    Tensor out = fn(inputs);
    Tensor loss = sum(mul(out, cotangent));
    analytic = gradients(loss, inputs);
  }

  double floor = 0.0;
  if (opts.min_grad_ratio > 0) {
    double largest = 0.0;
    for (const auto& g : analytic) {
      for (double v : g.data<double>()) largest = std::max(largest, std::abs(v));
    }
    floor = opts.min_grad_ratio * largest;
  }
  auto eligible = [&](std::size_t k, std::int64_t i) {
    return floor == 0.0 || std::abs(analytic[k].data<double>()[static_cast<std::size_t>(i)]) >= floor;
  };

  std::mt19937_64 pick(opts.seed);
  std::int64_t budget = opts.max_coords_total > 0 ? opts.max_coords_total : -1;
  std::vector<std::vector<std::int64_t>> coords(inputs.size());
  if (budget > 0) {
    // Sample a global budget of (input, index) pairs proportionally.
    std::vector<std::pair<std::size_t, std::int64_t>> all;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
        if (eligible(k, i)) all.emplace_back(k, i);
      }
    }
    report.coords_eligible = static_cast<std::int64_t>(all.size());
    std::shuffle(all.begin(), all.end(), pick);
    all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(budget)));
    for (auto& [k, i] : all) coords[k].push_back(i);
  } else {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
        if (eligible(k, i)) idx.push_back(i);
      }
      report.coords_eligible += static_cast<std::int64_t>(idx.size());
      if (opts.max_coords_per_input > 0 && static_cast<std::int64_t>(idx.size()) > opts.max_coords_per_input) {
        std::shuffle(idx.begin(), idx.end(), pick);
        idx.resize(static_cast<std::size_t>(opts.max_coords_per_input));
      }
      coords[k] = std::move(idx);
    }
  }

  NoGradGuard ng;
  report.per_input_errors.assign(inputs.size(), 0.0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data<double>();
    auto grad = analytic[k].data<double>();
    for (std::int64_t i : coords[k]) {
      const auto ui = static_cast<std::size_t>(i);
      const double orig = data[ui];
      data[ui] = orig + opts.step;
      const Tensor up = fn(inputs);
      data[ui] = orig - opts.step;
      const Tensor down = fn(inputs);
      data[ui] = orig;
      const double numeric = contract_difference(up, down) / (2.0 * opts.step);
      const double err = relative_error(grad[ui], numeric);
      ++report.coords_checked;
      report.per_input_errors[k] = std::max(report.per_input_errors[k], err);
    }
    report.max_rel_error = std::max(report.max_rel_error, report.per_input_errors[k]);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k].set_requires_grad(saved_flags[k]);
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace msu
