// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "msu/tensor.hpp"

namespace msu {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return mul_scalar(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return mul_scalar(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator+(double s, const Tensor& x) { return add_scalar(x, s); }
inline Tensor operator-(double s, const Tensor& x) { return add_scalar(neg(x), s); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// x^p for x >= 0.
Tensor pow_scalar(const Tensor& x, double p);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor softplus(const Tensor& x);

enum class Activation { sigmoid, silu, relu };

Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor activation(const Tensor& x, Activation kind);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

/// Splits [B,C,...] into channels [0,k) and [k,C).
std::pair<Tensor, Tensor> channel_split(const Tensor& x, std::int64_t k);
Tensor channel_concat(const std::vector<Tensor>& parts);

/// Group transpose: channel g*(C/groups)+k moves to k*groups+g.
Tensor channel_shuffle(const Tensor& x, int groups);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// x [B,Cin,H,W], weight [Cout,Cin/groups,kH,kW], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dOptions opts = {});

/// Affine map along the last axis; weight [Dout,Din].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

enum class PoolKind { avg, max };

/// Adaptive pooling: output cell (i,j) covers rows [floor(i*H/oh), ceil((i+1)*H/oh)).
Tensor pool(const Tensor& x, PoolKind kind, std::int64_t out_h, std::int64_t out_w);

/// Half-pixel (align-corners=false) bilinear resampling.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// Batch normalisation over axis 1 of [B,C,...]. In training mode batch
/// statistics are used and running stats are updated in place.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum = 0.1, double eps = 1e-5);

/// Normalises over a single axis, independently for every other index.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis,
                  double eps = 1e-6);

/// [B,C,H,W] -> [B,f*f*C,H/f,W/f]; channel index (p*f+q)*C+c holds pixel (f*i+p, f*j+q).
Tensor space_to_depth(const Tensor& x, int factor);
/// Inverse of space_to_depth.
Tensor depth_to_space(const Tensor& x, int factor);

/// Broadcasts `x` to `shape` without recording a graph (backward helper).
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums `x` down to `shape` along broadcast axes (backward helper).
Tensor reduce_to(const Tensor& x, const Shape& shape);

Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace msu
