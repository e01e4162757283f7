// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "msu/nn.hpp"
#include "msu/ssm.hpp"

namespace msu {

/// How the attention map enters the bottleneck.
///  - multiplicative: x'' = a ⊙ x'
///  - printed: x'' = a (the map itself replaces x')
enum class MCAttnForm { multiplicative, printed };

/// Candidate pooled sizes and their selection probabilities. Training draws
/// one size per call; evaluation uses the exact expectation.
struct MCAttnConfig {
  std::vector<std::int64_t> pool_sizes{1, 2, 3};
  std::vector<double> probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  MCAttnForm form = MCAttnForm::multiplicative;

  /// Throws ConfigError on empty sizes, duplicate or non-positive sizes,
  /// negative probabilities or probabilities not summing to 1.
  void validate() const;

  /// Sizes no larger than min(h, w), probabilities renormalised.
  MCAttnConfig restricted_to(std::int64_t h, std::int64_t w) const;
};

/// Index into cfg.pool_sizes drawn with cfg.probs.
std::size_t sample_pool_index(const MCAttnConfig& cfg, Rng& rng);

/// Attention map for one pooled size:
/// sigmoid(conv1x1(bilinear_resize(avg_pool(x, i), H, W))).
Tensor mc_attention_map(const Tensor& x, std::int64_t pool_size, const Tensor& weight,
                        const Tensor& bias);

/// Monte Carlo attention over x [B,C,H,W]. In training mode one pool size is
/// drawn from ctx.rng (its index is written to `chosen` when given); in
/// evaluation mode the probability-weighted mean of all maps is used.
Tensor monte_carlo_attention(const Tensor& x, const Tensor& weight, const Tensor& bias,
                             const MCAttnConfig& cfg, const Context& ctx,
                             std::size_t* chosen = nullptr);

class MonteCarloAttention : public Module {
 public:
  MonteCarloAttention(std::int64_t channels, MCAttnConfig cfg, const InitOptions& init, Rng& rng);
  Tensor forward(const Tensor& x, const Context& ctx, std::size_t* chosen = nullptr) const;

  std::shared_ptr<Conv2d> conv;
  MCAttnConfig cfg;
};

struct McatTrace {
  Tensor x_prime;
  Tensor x_double_prime;
  Tensor x_out;
};

struct BottleneckOptions {
  std::int64_t channels = 0;
  std::int64_t reduction = 4;
  /// false gives the plain convolutional bottleneck (no Monte Carlo attention).
  bool attention = true;
  MCAttnConfig mcattn{};
  InitOptions init{};
};

/// x' = reduce(x); x'' = MCAttn(x'); out = expand(conv3x3(x'')) + x.
class McatBottleneck : public Module {
 public:
  McatBottleneck(const BottleneckOptions& opts, Rng& rng);
  Tensor forward(const Tensor& x, const Context& ctx, McatTrace* trace = nullptr) const;

  std::shared_ptr<Conv2d> reduce;
  std::shared_ptr<MonteCarloAttention> attn;  // null when attention is off
  std::shared_ptr<Conv2d> conv3;
  std::shared_ptr<Conv2d> expand;
  std::int64_t channels;
};

struct DualBranchOptions {
  std::int64_t channels = 0;
  std::int64_t conv_branch_depth = 1;
  std::int64_t mamba_branch_depth = 1;
  BottleneckOptions bottleneck{};
  VSSOptions vss{};
};

/// Channel split -> (bottleneck stack | VSS stack) -> concat -> shuffle(2).
class SSMcatSSMBlock : public Module {
 public:
  SSMcatSSMBlock(const DualBranchOptions& opts, Rng& rng);
  Tensor forward(const Tensor& x, const Context& ctx) const;

  std::vector<std::shared_ptr<McatBottleneck>> conv_branch;
  std::vector<std::shared_ptr<VSSBlock>> mamba_branch;
  std::int64_t channels;
};

enum class FusionKind { adff, dff, none };
/// Channel attention realisation: shared two-layer MLP on both pooled
/// vectors, or a single 1x1 conv on their sum.
enum class ChannelAttentionForm { mlp, printed };

struct ADFFTrace {
  Tensor w_sp;
  Tensor f_l;
  Tensor w_ch;
  Tensor f_ch;
  Tensor fused;
};

struct FusionHooks {
  ADFFTrace* trace = nullptr;
  /// Replaces the spatial weights before they gate the output.
  std::function<Tensor(const Tensor&)> override_spatial;
};

struct FusionOptions {
  FusionKind kind = FusionKind::adff;
  ChannelAttentionForm channel_form = ChannelAttentionForm::mlp;
  std::int64_t channels = 0;
  std::int64_t reduction = 4;
  InitOptions init{};
};

/// Skip fusion of an encoder map and a decoder map of equal shape.
///  adff: w_sp ⊗ proj(w_ch ⊗ BN(concat))
///  dff:  w_sp ⊗ proj(BN(concat))
///  none: proj(concat)
class FusionBlock : public Module {
 public:
  FusionBlock(const FusionOptions& opts, Rng& rng);
  Tensor forward(const Tensor& f_enc, const Tensor& f_dec, const Context& ctx,
                 const FusionHooks& hooks = {});

  std::shared_ptr<Conv2d> spatial_enc;
  std::shared_ptr<Conv2d> spatial_dec;
  std::shared_ptr<BatchNorm2d> norm;
  std::shared_ptr<Linear> mlp_fc1;
  std::shared_ptr<Linear> mlp_fc2;
  std::shared_ptr<Conv2d> channel_conv;
  std::shared_ptr<Conv2d> proj;
  FusionOptions opts;
};

/// 4x4 stride-4 conv + channel layer norm.
class PatchEmbed : public Module {
 public:
  PatchEmbed(std::int64_t in_channels, std::int64_t dim, int patch, const InitOptions& init, Rng& rng);
  Tensor forward(const Tensor& img) const;

  std::shared_ptr<Conv2d> proj;
  std::shared_ptr<ChannelLayerNorm> norm;
  int patch;
};

/// 2x2 neighbourhood concat (4C) + layer norm + linear 4C -> 2C.
class PatchMerge : public Module {
 public:
  PatchMerge(std::int64_t channels, const InitOptions& init, Rng& rng);
  Tensor forward(const Tensor& x) const;

  std::shared_ptr<ChannelLayerNorm> norm;
  std::shared_ptr<Conv2d> reduction;
};

/// Linear C -> factor*C, depth-to-space by `factor`, layer norm on C/factor.
class PatchExpand : public Module {
 public:
  PatchExpand(std::int64_t channels, int factor, const InitOptions& init, Rng& rng);
  Tensor forward(const Tensor& x) const;

  std::shared_ptr<Conv2d> expand;
  std::shared_ptr<ChannelLayerNorm> norm;
  int factor;
};

}  // namespace msu
