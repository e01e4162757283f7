// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>

#include "msu/nn.hpp"

namespace msu {

/// Selective state-space scan (S6), zero initial state.
///
///   h_t = exp(Δ_t A_c) ⊙ h_{t-1} + Δ_t B_t u_t
///   y_t = <C_t, h_t> + D_c u_t
///
/// u, delta: [B,C,L]; A: [C,N]; Bmat, Cmat: [B,N,L]; D: [C]. delta must be
/// strictly positive.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& Bmat,
                      const Tensor& Cmat, const Tensor& D);

/// Four traversals of [B,C,H,W] into [B,4,C,H*W]: row-major, column-major,
/// and the reverses of both.
Tensor cross_scan(const Tensor& x);

/// Maps each path of [B,4,C,H*W] back to its spatial position and sums.
Tensor cross_merge(const Tensor& y4, std::int64_t h, std::int64_t w);

/// cross_scan -> selective_scan on every path -> cross_merge, with the
/// per-path scan inputs given explicitly. delta4: [4B,C,L]; B4, C4: [4B,N,L].
Tensor ss2d_scan_merge(const Tensor& x, const Tensor& delta4, const Tensor& A, const Tensor& B4,
                       const Tensor& C4, const Tensor& D);

struct S6Options {
  std::int64_t channels = 0;
  std::int64_t state_dim = 16;
  std::int64_t dt_rank = 1;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
};

/// S6 parameters shared by the four scan paths. A = -exp(a_log) < 0.
class S6Params : public Module {
 public:
  S6Params(const S6Options& opts, Rng& rng);

  Tensor a_matrix() const;

  Tensor x_proj;     // [dt_rank + 2N, C, 1, 1]
  Tensor dt_weight;  // [C, dt_rank, 1, 1]
  Tensor dt_bias;    // [C]
  Tensor a_log;      // [C, N]
  Tensor d_skip;     // [C]
  S6Options opts;
};

/// 2-D selective scan over a feature map, followed by the output norm.
class SS2D : public Module {
 public:
  SS2D(const S6Options& opts, Rng& rng);
  Tensor forward(const Tensor& x) const;

  std::shared_ptr<S6Params> s6;
  std::shared_ptr<ChannelLayerNorm> out_norm;
};

struct VSSOptions {
  std::int64_t channels = 0;
  std::int64_t expansion = 2;
  std::int64_t state_dim = 16;
  /// 0 picks ceil(channels / 16).
  std::int64_t dt_rank = 0;
  InitOptions init{};
};

/// Visual state-space block:
/// y = x + out_proj( ss2d(silu(dw_conv(a))) ⊙ silu(z) ),  (a, z) = in_proj(norm(x)).
class VSSBlock : public Module {
 public:
  VSSBlock(const VSSOptions& opts, Rng& rng);
  Tensor forward(const Tensor& x) const;

  std::shared_ptr<ChannelLayerNorm> norm;
  std::shared_ptr<Conv2d> in_proj;
  std::shared_ptr<Conv2d> dw_conv;
  std::shared_ptr<SS2D> ss2d;
  std::shared_ptr<Conv2d> out_proj;
  std::int64_t inner;
};

}  // namespace msu
