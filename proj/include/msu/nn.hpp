// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msu/ops.hpp"
#include "msu/tensor.hpp"

namespace msu {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

/// Per-call execution context. Stochastic layers draw from `rng`, which
/// must be set in training mode.
struct Context {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;

  bool training() const { return mode == Mode::train; }
  Rng& require_rng(const char* who) const;
};

using NamedTensor = std::pair<std::string, Tensor>;

enum class InitScheme { trunc_normal, kaiming_uniform };

struct InitOptions {
  InitScheme scheme = InitScheme::trunc_normal;
  double std = 0.02;
};

/// Truncated normal (cut at two standard deviations).
void init_trunc_normal(Tensor& t, double std, Rng& rng);
void init_uniform(Tensor& t, double bound, Rng& rng);
void init_weight(Tensor& t, const InitOptions& opts, Rng& rng);

/// Hierarchical container of parameters, buffers and child modules.
class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> named_buffers() const;
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;

  /// Parameter counts keyed by direct child name (own parameters under "").
  std::map<std::string, std::int64_t> parameter_breakdown() const;

 protected:
  Tensor register_parameter(const std::string& name, Tensor t);
  Tensor register_buffer(const std::string& name, Tensor t);
  template <class M>
  std::shared_ptr<M> register_module(const std::string& name, std::shared_ptr<M> m) {
    children_.emplace_back(name, m);
    return m;
  }

 private:
  void collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const;

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

class Conv2d : public Module {
 public:
  struct Options {
    std::int64_t in_channels = 1;
    std::int64_t out_channels = 1;
    int kernel = 1;
    Conv2dOptions conv{};
    bool bias = true;
  };
  Conv2d(const Options& opts, const InitOptions& init, Rng& rng);

  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
  Options opts;
};

class Linear : public Module {
 public:
  Linear(std::int64_t in, std::int64_t out, bool bias, const InitOptions& init, Rng& rng);
  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
};

/// Layer norm over the channel axis of [B,C,...].
class ChannelLayerNorm : public Module {
 public:
  explicit ChannelLayerNorm(std::int64_t channels, double eps = 1e-6);
  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
  double eps;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, const Context& ctx);

  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  double momentum;
  double eps;
};

}  // namespace msu
