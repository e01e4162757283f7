// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace msu {

void MCAttnConfig::validate() const {
  if (pool_sizes.empty()) throw ConfigError("mcattn.pool_sizes must not be empty");
  if (pool_sizes.size() != probs.size()) {
    throw ConfigError("mcattn.probs must have one entry per pool size");
  }
  std::set<std::int64_t> seen;
  for (auto s : pool_sizes) {
    if (s < 1) throw ConfigError("mcattn.pool_sizes entries must be >= 1");
    if (!seen.insert(s).second) throw ConfigError("mcattn.pool_sizes entries must be distinct");
  }
  double total = 0;
  for (double p : probs) {
    if (!(p >= 0)) throw ConfigError("mcattn.probs must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mcattn.probs must sum to 1");
}

MCAttnConfig MCAttnConfig::restricted_to(std::int64_t h, std::int64_t w) const {
  MCAttnConfig out;
  out.form = form;
  out.pool_sizes.clear();
  out.probs.clear();
  double total = 0;
  for (std::size_t i = 0; i < pool_sizes.size(); ++i) {
    if (pool_sizes[i] <= std::min(h, w)) {
      out.pool_sizes.push_back(pool_sizes[i]);
      out.probs.push_back(probs[i]);
      total += probs[i];
    }
  }
  if (out.pool_sizes.empty() || total <= 0) {
    throw ContractViolation("monte_carlo_attention: no pool size fits a " + std::to_string(h) + "x" +
                            std::to_string(w) + " map");
  }
  for (auto& p : out.probs) p /= total;
  return out;
}

std::size_t sample_pool_index(const MCAttnConfig& cfg, Rng& rng) {
  // 53-bit uniform in [0,1), independent of the standard library's distributions.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  double acc = 0;
  for (std::size_t i = 0; i < cfg.probs.size(); ++i) {
    acc += cfg.probs[i];
    if (u < acc) return i;
  }
  return cfg.probs.size() - 1;
}

Tensor mc_attention_map(const Tensor& x, std::int64_t pool_size, const Tensor& weight, const Tensor& bias) {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Tensor pooled = pool(x, PoolKind::avg, pool_size, pool_size);
  return sigmoid(conv2d(bilinear_resize(pooled, h, w), weight, bias));
}

Tensor monte_carlo_attention(const Tensor& x, const Tensor& weight, const Tensor& bias,
                             const MCAttnConfig& cfg, const Context& ctx, std::size_t* chosen) {
  cfg.validate();
  if (x.ndim() != 4) throw ContractViolation("monte_carlo_attention: expects [B,C,H,W]");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  const auto largest = *std::max_element(cfg.pool_sizes.begin(), cfg.pool_sizes.end());
  if (largest > std::min(h, w)) {
    throw ContractViolation("monte_carlo_attention: pool size " + std::to_string(largest) +
                            " exceeds feature map " + std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor attn;
  if (ctx.training()) {
    const std::size_t i = sample_pool_index(cfg, ctx.require_rng("monte_carlo_attention"));
    if (chosen) *chosen = i;
    attn = mc_attention_map(x, cfg.pool_sizes[i], weight, bias);
  } else {
    for (std::size_t i = 0; i < cfg.pool_sizes.size(); ++i) {
      if (cfg.probs[i] == 0.0) continue;
      Tensor term = mul_scalar(mc_attention_map(x, cfg.pool_sizes[i], weight, bias), cfg.probs[i]);
      attn = attn.defined() ? add(attn, term) : term;
    }
  }
  return cfg.form == MCAttnForm::multiplicative ? mul(attn, x) : attn;
}

MonteCarloAttention::MonteCarloAttention(std::int64_t channels, MCAttnConfig c, const InitOptions& init, Rng& rng)
    : cfg(std::move(c)) {
  cfg.validate();
  conv = register_module("conv", std::make_shared<Conv2d>(Conv2d::Options{channels, channels, 1, {}, true}, init, rng));
}

Tensor MonteCarloAttention::forward(const Tensor& x, const Context& ctx, std::size_t* chosen) const {
  return monte_carlo_attention(x, conv->weight, conv->bias, cfg, ctx, chosen);
}

McatBottleneck::McatBottleneck(const BottleneckOptions& o, Rng& rng) : channels(o.channels) {
  if (o.reduction < 1 || o.channels / o.reduction < 1) {
    throw ConfigError("McatBottleneck: reduced width " + std::to_string(o.channels) + "/" +
                      std::to_string(o.reduction) + " must be >= 1");
  }
  const std::int64_t mid = o.channels / o.reduction;
  InitOptions spatial{InitScheme::kaiming_uniform, 0.0};
  reduce = register_module("reduce", std::make_shared<Conv2d>(Conv2d::Options{o.channels, mid, 1, {}, true}, o.init, rng));
  if (o.attention) attn = register_module("attn", std::make_shared<MonteCarloAttention>(mid, o.mcattn, o.init, rng));
  conv3 = register_module("conv3", std::make_shared<Conv2d>(Conv2d::Options{mid, mid, 3, {1, 1, 1}, true}, spatial, rng));
  expand = register_module("expand", std::make_shared<Conv2d>(Conv2d::Options{mid, o.channels, 1, {}, true}, o.init, rng));
}

Tensor McatBottleneck::forward(const Tensor& x, const Context& ctx, McatTrace* trace) const {
  if (x.ndim() != 4 || x.dim(1) != channels) {
    throw ContractViolation("McatBottleneck: expected " + std::to_string(channels) + " channels, got " +
                            to_string(x.shape()));
  }
  Tensor xp = reduce->forward(x);
  Tensor xpp = xp;
  if (attn) {
    const MCAttnConfig fitted = attn->cfg.restricted_to(xp.dim(2), xp.dim(3));
    xpp = monte_carlo_attention(xp, attn->conv->weight, attn->conv->bias, fitted, ctx);
  }
  Tensor out = add(expand->forward(conv3->forward(xpp)), x);
  if (trace) *trace = {xp, xpp, out};
  return out;
}

SSMcatSSMBlock::SSMcatSSMBlock(const DualBranchOptions& o, Rng& rng) : channels(o.channels) {
  if (o.channels < 2 || o.channels % 2 != 0) {
    throw ConfigError("SSMcatSSMBlock: channel count " + std::to_string(o.channels) + " must be even");
  }
  if (o.conv_branch_depth < 1 || o.mamba_branch_depth < 1) {
    throw ConfigError("SSMcatSSMBlock: branch depths must be >= 1");
  }
  const std::int64_t half = o.channels / 2;
  BottleneckOptions bo = o.bottleneck;
  bo.channels = half;
  for (std::int64_t i = 0; i < o.conv_branch_depth; ++i) {
    conv_branch.push_back(register_module("conv_branch." + std::to_string(i), std::make_shared<McatBottleneck>(bo, rng)));
  }
  VSSOptions vo = o.vss;
  vo.channels = half;
  for (std::int64_t i = 0; i < o.mamba_branch_depth; ++i) {
    mamba_branch.push_back(register_module("mamba_branch." + std::to_string(i), std::make_shared<VSSBlock>(vo, rng)));
  }
}

Tensor SSMcatSSMBlock::forward(const Tensor& x, const Context& ctx) const {
  if (x.ndim() != 4 || x.dim(1) != channels) {
    throw ContractViolation("SSMcatSSMBlock: expected " + std::to_string(channels) + " channels, got " +
                            to_string(x.shape()));
  }
  auto [a, b] = channel_split(x, channels / 2);
  for (const auto& blk : conv_branch) a = blk->forward(a, ctx);
  for (const auto& blk : mamba_branch) b = blk->forward(b);
  return channel_shuffle(channel_concat({a, b}), 2);
}

FusionBlock::FusionBlock(const FusionOptions& o, Rng& rng) : opts(o) {
  const std::int64_t c = o.channels;
  if (c < 1) throw ConfigError("FusionBlock: channels must be >= 1");
  if (o.kind != FusionKind::none) {
    spatial_enc = register_module("spatial_enc", std::make_shared<Conv2d>(Conv2d::Options{c, 1, 1, {}, true}, o.init, rng));
    spatial_dec = register_module("spatial_dec", std::make_shared<Conv2d>(Conv2d::Options{c, 1, 1, {}, true}, o.init, rng));
    norm = register_module("norm", std::make_shared<BatchNorm2d>(2 * c));
  }
  if (o.kind == FusionKind::adff) {
    if (o.channel_form == ChannelAttentionForm::mlp) {
      const std::int64_t hidden = std::max<std::int64_t>(2 * c / o.reduction, 1);
      mlp_fc1 = register_module("channel_mlp.fc1", std::make_shared<Linear>(2 * c, hidden, true, o.init, rng));
      mlp_fc2 = register_module("channel_mlp.fc2", std::make_shared<Linear>(hidden, 2 * c, true, o.init, rng));
    } else {
      channel_conv = register_module("channel_conv",
                                     std::make_shared<Conv2d>(Conv2d::Options{2 * c, 2 * c, 1, {}, true}, o.init, rng));
    }
  }
  proj = register_module("proj", std::make_shared<Conv2d>(Conv2d::Options{2 * c, c, 1, {}, true}, o.init, rng));
}

Tensor FusionBlock::forward(const Tensor& f_enc, const Tensor& f_dec, const Context& ctx, const FusionHooks& hooks) {
  if (f_enc.shape() != f_dec.shape()) {
    throw ContractViolation("FusionBlock: encoder map " + to_string(f_enc.shape()) + " and decoder map " +
                            to_string(f_dec.shape()) + " differ");
  }
  if (f_enc.ndim() != 4 || f_enc.dim(1) != opts.channels) {
    throw ContractViolation("FusionBlock: expected " + std::to_string(opts.channels) + " channels");
  }
  Tensor cat = channel_concat({f_enc, f_dec});
  if (opts.kind == FusionKind::none) {
    Tensor out = proj->forward(cat);
    if (hooks.trace) *hooks.trace = {Tensor(), cat, Tensor(), out, out};
    return out;
  }
  Tensor w_sp = sigmoid(add(spatial_enc->forward(f_enc), spatial_dec->forward(f_dec)));
  if (hooks.override_spatial) w_sp = hooks.override_spatial(w_sp);
  Tensor f_l = norm->forward(cat, ctx);
  Tensor w_ch;
  Tensor f_ch;
  if (opts.kind == FusionKind::adff) {
    const std::int64_t nb = f_l.dim(0), c2 = f_l.dim(1);
    Tensor avg = pool(f_l, PoolKind::avg, 1, 1);
    Tensor mx = pool(f_l, PoolKind::max, 1, 1);
    Tensor logits;
    if (opts.channel_form == ChannelAttentionForm::mlp) {
      auto mlp = [&](const Tensor& v) {
        return mlp_fc2->forward(relu(mlp_fc1->forward(reshape(v, {nb, c2}))));
      };
      logits = reshape(add(mlp(avg), mlp(mx)), {nb, c2, 1, 1});
    } else {
      logits = channel_conv->forward(add(avg, mx));
    }
    w_ch = sigmoid(logits);
    f_ch = proj->forward(mul(w_ch, f_l));
  } else {
    f_ch = proj->forward(f_l);
  }
  Tensor fused = mul(w_sp, f_ch);
  if (hooks.trace) *hooks.trace = {w_sp, f_l, w_ch, f_ch, fused};
  return fused;
}

PatchEmbed::PatchEmbed(std::int64_t in_channels, std::int64_t dim, int p, const InitOptions&, Rng& rng) : patch(p) {
  InitOptions spatial{InitScheme::kaiming_uniform, 0.0};
  proj = register_module("proj", std::make_shared<Conv2d>(Conv2d::Options{in_channels, dim, p, {p, 0, 1}, true}, spatial, rng));
  norm = register_module("norm", std::make_shared<ChannelLayerNorm>(dim));
}

Tensor PatchEmbed::forward(const Tensor& img) const {
  if (img.ndim() != 4) throw InputError("PatchEmbed: expects [B,C,H,W], got " + to_string(img.shape()));
  if (img.dim(2) % patch != 0 || img.dim(3) % patch != 0) {
    throw InputError("PatchEmbed: H and W must be divisible by " + std::to_string(patch) + ", got " +
                     std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(3)));
  }
  return norm->forward(proj->forward(img));
}

PatchMerge::PatchMerge(std::int64_t channels, const InitOptions& init, Rng& rng) {
  norm = register_module("norm", std::make_shared<ChannelLayerNorm>(4 * channels));
  reduction = register_module("reduction",
                              std::make_shared<Conv2d>(Conv2d::Options{4 * channels, 2 * channels, 1, {}, false}, init, rng));
}

Tensor PatchMerge::forward(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw InputError("PatchMerge: H and W must be even, got " + to_string(x.shape()));
  }
  return reduction->forward(norm->forward(space_to_depth(x, 2)));
}

PatchExpand::PatchExpand(std::int64_t channels, int f, const InitOptions& init, Rng& rng) : factor(f) {
  if (f < 1 || channels % f != 0) {
    throw ConfigError("PatchExpand: " + std::to_string(channels) + " channels not divisible by factor " +
                      std::to_string(f));
  }
  expand = register_module("expand",
                           std::make_shared<Conv2d>(Conv2d::Options{channels, f * channels, 1, {}, false}, init, rng));
  norm = register_module("norm", std::make_shared<ChannelLayerNorm>(channels / f));
}

Tensor PatchExpand::forward(const Tensor& x) const {
  return norm->forward(depth_to_space(expand->forward(x), factor));
}

}  // namespace msu
