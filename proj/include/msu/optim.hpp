// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "msu/nn.hpp"

namespace msu {

enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
  std::string name = "adam";
  double lr = 1e-3;
  double min_lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  LrSchedule schedule = LrSchedule::cosine;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

/// Learning rate for 0-based `step` out of `total_steps`.
double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step, std::int64_t total_steps);

/// Adam with bias correction; moments kept in the parameter dtype.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, OptimizerConfig cfg);

  /// Updates every parameter in place with its gradient (same order as params).
  void step(const std::vector<Tensor>& grads, double lr);

  std::int64_t steps_taken() const { return steps_; }

  /// "m.<param>" and "v.<param>" moment tensors.
  std::vector<NamedTensor> state_tensors() const;
  void load_state(const std::map<std::string, Tensor>& tensors, std::int64_t steps);

  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  OptimizerConfig cfg_;
  std::int64_t steps_ = 0;
};

}  // namespace msu
