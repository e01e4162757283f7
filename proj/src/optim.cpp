// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/optim.hpp"

#include <cmath>
#include <numbers>

#include "msu/json_util.hpp"

namespace msu {

void OptimizerConfig::validate() const {
  if (name != "adam") throw ConfigError("optimizer.name: only 'adam' is supported, got '" + name + "'");
  if (!(lr > 0)) throw ConfigError("optimizer.lr: must be > 0");
  if (!(min_lr >= 0 && min_lr <= lr)) throw ConfigError("optimizer.min_lr: must lie in [0, lr]");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("optimizer.beta1: must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer.beta2: must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("optimizer.eps: must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("optimizer.weight_decay: must be >= 0");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"name", name},   {"lr", lr},
          {"min_lr", min_lr}, {"beta1", beta1},
          {"beta2", beta2}, {"eps", eps},
          {"weight_decay", weight_decay}, {"schedule", schedule == LrSchedule::cosine ? "cosine" : "constant"}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  JsonReader r(j, "optimizer");
  r.get("name", c.name);
  r.get("lr", c.lr);
  r.get("min_lr", c.min_lr);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("weight_decay", c.weight_decay);
  if (const auto* s = r.raw("schedule")) {
    const std::string v = s->is_string() ? s->get<std::string>() : "";
    if (v == "cosine") {
      c.schedule = LrSchedule::cosine;
    } else if (v == "constant") {
      c.schedule = LrSchedule::constant;
    } else {
      throw ConfigError("optimizer.schedule: expected 'cosine' or 'constant'");
    }
  }
  r.finish();
  c.validate();
  return c;
}

double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.schedule == LrSchedule::constant || total_steps <= 1) return cfg.lr;
  const double t = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(std::vector<NamedTensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(std::move(cfg)) {
  cfg_.validate();
  for (const auto& [name, p] : params_) {
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void Adam::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params_.size()) throw ContractViolation("Adam::step: gradient count mismatch");
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    if (grads[i].shape() != p.shape()) {
      throw ContractViolation("Adam::step: gradient shape mismatch for " + params_[i].first);
    }
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pv = p.mutable_data<T>();
      auto g = grads[i].data<T>();
      auto m = m_[i].mutable_data<T>();
      auto v = v_[i].mutable_data<T>();
      for (std::size_t k = 0; k < pv.size(); ++k) {
        double gk = g[k];
        if (cfg_.weight_decay > 0) gk += cfg_.weight_decay * pv[k];
        const double mk = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
        const double vk = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        pv[k] = static_cast<T>(pv[k] - lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps));
      }
    });
  }
}

std::vector<NamedTensor> Adam::state_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m." + params_[i].first, m_[i]);
    out.emplace_back("v." + params_[i].first, v_[i]);
  }
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor>& tensors, std::int64_t steps) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto* slot : {&m_[i], &v_[i]}) {
      const std::string key = (slot == &m_[i] ? "m." : "v.") + params_[i].first;
      auto it = tensors.find(key);
      if (it == tensors.end()) throw CheckpointError("optimizer state is missing '" + key + "'");
      if (it->second.shape() != slot->shape() || it->second.dtype() != slot->dtype()) {
        throw CheckpointError("optimizer state '" + key + "' has the wrong shape or dtype");
      }
      slot->copy_from_(it->second);
    }
  }
  steps_ = steps;
}

}  // namespace msu
