// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/nn.hpp"

#include <cmath>

namespace msu {

Rng& Context::require_rng(const char* who) const {
  if (!rng) throw ContractViolation(std::string(who) + ": training mode requires an rng");
  return *rng;
}

void init_trunc_normal(Tensor& t, double std, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) {
      double z = n(rng);
      while (std::abs(z) > 2.0) z = n(rng);
      v = static_cast<T>(z * std);
    }
  });
}

void init_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(u(rng));
  });
}

void init_weight(Tensor& t, const InitOptions& opts, Rng& rng) {
  if (opts.scheme == InitScheme::trunc_normal) {
    init_trunc_normal(t, opts.std, rng);
    return;
  }
  // fan_in = all axes but the first.
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < t.shape().size(); ++i) fan_in *= t.shape()[i];
  init_uniform(t, 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1))), rng);
}

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  collect("", true, out);
  return out;
}

std::vector<NamedTensor> Module::named_buffers() const {
  std::vector<NamedTensor> out;
  collect("", false, out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t Module::parameter_count() const {
  std::int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

std::map<std::string, std::int64_t> Module::parameter_breakdown() const {
  std::map<std::string, std::int64_t> out;
  for (auto& [name, t] : params_) out[""] += t.numel();
  for (auto& [name, child] : children_) out[name] += child->parameter_count();
  return out;
}

Tensor Module::register_parameter(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

Tensor Module::register_buffer(const std::string& name, Tensor t) {
  buffers_.emplace_back(name, t);
  return t;
}

void Module::collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const {
  for (const auto& [name, t] : params ? params_ : buffers_) out.emplace_back(prefix + name, t);
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", params, out);
}

Conv2d::Conv2d(const Options& o, const InitOptions& init, Rng& rng) : opts(o) {
  if (o.conv.groups < 1 || o.in_channels % o.conv.groups != 0 || o.out_channels % o.conv.groups != 0) {
    throw ConfigError("Conv2d: groups=" + std::to_string(o.conv.groups) + " must divide " +
                      std::to_string(o.in_channels) + " and " + std::to_string(o.out_channels));
  }
  Tensor w = Tensor::empty({o.out_channels, o.in_channels / o.conv.groups, o.kernel, o.kernel});
  init_weight(w, init, rng);
  weight = register_parameter("weight", w);
  if (o.bias) bias = register_parameter("bias", Tensor::zeros({o.out_channels}));
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, opts.conv); }

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, const InitOptions& init, Rng& rng) {
  Tensor w = Tensor::empty({out, in});
  init_weight(w, init, rng);
  weight = register_parameter("weight", w);
  if (with_bias) bias = register_parameter("bias", Tensor::zeros({out}));
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

ChannelLayerNorm::ChannelLayerNorm(std::int64_t channels, double e) : eps(e) {
  weight = register_parameter("weight", Tensor::ones({channels}));
  bias = register_parameter("bias", Tensor::zeros({channels}));
}

Tensor ChannelLayerNorm::forward(const Tensor& x) const { return layer_norm(x, weight, bias, 1, eps); }

BatchNorm2d::BatchNorm2d(std::int64_t channels, double m, double e) : momentum(m), eps(e) {
  weight = register_parameter("weight", Tensor::ones({channels}));
  bias = register_parameter("bias", Tensor::zeros({channels}));
  running_mean = register_buffer("running_mean", Tensor::zeros({channels}));
  running_var = register_buffer("running_var", Tensor::ones({channels}));
}

Tensor BatchNorm2d::forward(const Tensor& x, const Context& ctx) {
  return batch_norm(x, weight, bias, running_mean, running_var, ctx.training(), momentum, eps);
}

}  // namespace msu
