// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/ssm.hpp"

#include <cmath>

#include "msu/debug.hpp"

namespace msu {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

// Spatial index visited at sequence position l of path k.
std::vector<std::int64_t> path_index(int k, std::int64_t h, std::int64_t w) {
  const std::int64_t len = h * w;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
  for (std::int64_t l = 0; l < len; ++l) {
    const std::int64_t s = (k >= 2) ? len - 1 - l : l;
    idx[static_cast<std::size_t>(l)] = (k % 2 == 0) ? s : (s % h) * w + s / h;
  }
  return idx;
}

std::vector<std::vector<std::int64_t>> all_paths(std::int64_t h, std::int64_t w) {
  return {path_index(0, h, w), path_index(1, h, w), path_index(2, h, w), path_index(3, h, w)};
}

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& Bmat,
                      const Tensor& Cmat, const Tensor& D) {
  require(u.ndim() == 3, "selective_scan: u must be [B,C,L], got " + to_string(u.shape()));
  const std::int64_t nb = u.dim(0), c = u.dim(1), len = u.dim(2);
  require(A.ndim() == 2 && A.dim(0) == c, "selective_scan: A must be [C,N], got " + to_string(A.shape()));
  const std::int64_t n = A.dim(1);
  require(delta.shape() == u.shape(), "selective_scan: delta must match u");
  require(Bmat.shape() == Shape{nb, n, len}, "selective_scan: B must be [B,N,L], got " + to_string(Bmat.shape()));
  require(Cmat.shape() == Shape{nb, n, len}, "selective_scan: C must be [B,N,L], got " + to_string(Cmat.shape()));
  require(D.shape() == Shape{c}, "selective_scan: D must be [C]");
  for (const auto* t : {&delta, &A, &Bmat, &Cmat, &D}) {
    require(t->dtype() == u.dtype(), "selective_scan: dtype mismatch");
  }

  Tensor y = Tensor::empty(u.shape(), u.dtype());
  auto states = std::make_shared<std::vector<double>>(static_cast<std::size_t>(nb * c * len * n));
  dispatch(u.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pu = u.data<T>();
    auto pd = delta.data<T>();
    auto pa = A.data<T>();
    auto pbm = Bmat.data<T>();
    auto pcm = Cmat.data<T>();
    auto pD = D.data<T>();
    auto py = y.mutable_data<T>();
    for (T v : pd) {
      if (!(v > T(0))) throw ContractViolation("selective_scan: delta must be strictly positive");
    }
    std::vector<double> h(static_cast<std::size_t>(n));
    for (std::int64_t b = 0; b < nb; ++b) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        std::fill(h.begin(), h.end(), 0.0);
        const std::int64_t row = (b * c + ch) * len;
        for (std::int64_t t = 0; t < len; ++t) {
          const double d = pd[static_cast<std::size_t>(row + t)];
          const double x = pu[static_cast<std::size_t>(row + t)];
          double acc = 0;
          double* hs = states->data() + (row + t) * n;
          for (std::int64_t s = 0; s < n; ++s) {
            const auto us = static_cast<std::size_t>(s);
            const auto bn = static_cast<std::size_t>((b * n + s) * len + t);
            h[us] = std::exp(d * pa[static_cast<std::size_t>(ch * n + s)]) * h[us] + d * pbm[bn] * x;
            acc += pcm[bn] * h[us];
            hs[s] = h[us];
          }
          py[static_cast<std::size_t>(row + t)] = static_cast<T>(acc + pD[static_cast<std::size_t>(ch)] * x);
        }
      }
    }
  });

  detail::finish(y, "selective_scan", {u, delta, A, Bmat, Cmat, D},
                 [u, delta, A, Bmat, Cmat, D, states, nb, c, len, n](const Tensor& gy) {
                   Tensor gu = Tensor::zeros(u.shape(), u.dtype());
                   Tensor gd = Tensor::zeros(u.shape(), u.dtype());
                   Tensor gA = Tensor::zeros(A.shape(), u.dtype());
                   Tensor gB = Tensor::zeros(Bmat.shape(), u.dtype());
                   Tensor gC = Tensor::zeros(Cmat.shape(), u.dtype());
                   Tensor gD = Tensor::zeros(D.shape(), u.dtype());
                   dispatch(u.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto pu = u.data<T>();
                     auto pd = delta.data<T>();
                     auto pa = A.data<T>();
                     auto pbm = Bmat.data<T>();
                     auto pcm = Cmat.data<T>();
                     auto pD = D.data<T>();
                     auto pg = gy.data<T>();
                     auto ogu = gu.mutable_data<T>();
                     auto ogd = gd.mutable_data<T>();
                     auto ogA = gA.mutable_data<T>();
                     auto ogB = gB.mutable_data<T>();
                     auto ogC = gC.mutable_data<T>();
                     auto ogD = gD.mutable_data<T>();
                     std::vector<double> gh(static_cast<std::size_t>(n));
                     std::vector<double> accA(static_cast<std::size_t>(c * n), 0.0);
                     std::vector<double> accD(static_cast<std::size_t>(c), 0.0);
                     for (std::int64_t b = 0; b < nb; ++b) {
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         std::fill(gh.begin(), gh.end(), 0.0);
                         const std::int64_t row = (b * c + ch) * len;
                         for (std::int64_t t = len - 1; t >= 0; --t) {
                           const double d = pd[static_cast<std::size_t>(row + t)];
                           const double x = pu[static_cast<std::size_t>(row + t)];
                           const double g = pg[static_cast<std::size_t>(row + t)];
                           const double* hs = states->data() + (row + t) * n;
                           const double* hp = t > 0 ? states->data() + (row + t - 1) * n : nullptr;
                           accD[static_cast<std::size_t>(ch)] += g * x;
                           double gx = g * pD[static_cast<std::size_t>(ch)];
                           double gdt = 0;
                           for (std::int64_t s = 0; s < n; ++s) {
                             const auto us = static_cast<std::size_t>(s);
                             const auto bn = static_cast<std::size_t>((b * n + s) * len + t);
                             const double as = pa[static_cast<std::size_t>(ch * n + s)];
                             const double decay = std::exp(d * as);
                             ogC[bn] += static_cast<T>(g * hs[s]);
                             const double ght = gh[us] + g * pcm[bn];
                             const double prev = hp ? hp[s] : 0.0;
                             const double gdecay = ght * prev;
                             gdt += gdecay * decay * as + ght * pbm[bn] * x;
                             accA[static_cast<std::size_t>(ch * n + s)] += gdecay * decay * d;
                             ogB[bn] += static_cast<T>(ght * d * x);
                             gx += ght * d * pbm[bn];
                             gh[us] = ght * decay;
                           }
                           ogu[static_cast<std::size_t>(row + t)] = static_cast<T>(gx);
                           ogd[static_cast<std::size_t>(row + t)] = static_cast<T>(gdt * debug::fault_factor("selective_scan"));
                         }
                       }
                     }
                     for (std::size_t i = 0; i < accA.size(); ++i) ogA[i] = static_cast<T>(accA[i]);
                     for (std::size_t i = 0; i < accD.size(); ++i) ogD[i] = static_cast<T>(accD[i]);
                   });
                   return std::vector<Tensor>{gu, gd, gA, gB, gC, gD};
                 });
  return y;
}

Tensor cross_scan(const Tensor& x) {
  require(x.ndim() == 4, "cross_scan: expects [B,C,H,W], got " + to_string(x.shape()));
  const std::int64_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), len = h * w;
  const auto paths = all_paths(h, w);
  Tensor out = Tensor::empty({nb, 4, c, len}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t b = 0; b < nb; ++b) {
      for (int k = 0; k < 4; ++k) {
        const auto& idx = paths[static_cast<std::size_t>(k)];
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* src = px.data() + (b * c + ch) * len;
          T* dst = po.data() + ((b * 4 + k) * c + ch) * len;
          for (std::int64_t l = 0; l < len; ++l) dst[l] = src[idx[static_cast<std::size_t>(l)]];
        }
      }
    }
  });
  detail::finish(out, "cross_scan", {x}, [h, w](const Tensor& g) {
    return std::vector<Tensor>{cross_merge(g, h, w)};
  });
  return out;
}

Tensor cross_merge(const Tensor& y4, std::int64_t h, std::int64_t w) {
  require(y4.ndim() == 4 && y4.dim(1) == 4, "cross_merge: expects [B,4,C,L], got " + to_string(y4.shape()));
  const std::int64_t nb = y4.dim(0), c = y4.dim(2), len = y4.dim(3);
  require(len == h * w, "cross_merge: sequence length " + std::to_string(len) + " != " +
                            std::to_string(h) + "*" + std::to_string(w));
  const auto paths = all_paths(h, w);
  Tensor out = Tensor::zeros({nb, c, h, w}, y4.dtype());
  dispatch(y4.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto py = y4.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t b = 0; b < nb; ++b) {
      for (int k = 0; k < 4; ++k) {
        const auto& idx = paths[static_cast<std::size_t>(k)];
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* src = py.data() + ((b * 4 + k) * c + ch) * len;
          T* dst = po.data() + (b * c + ch) * len;
          for (std::int64_t l = 0; l < len; ++l) dst[idx[static_cast<std::size_t>(l)]] += src[l];
        }
      }
    }
  });
  detail::finish(out, "cross_merge", {y4}, [](const Tensor& g) {
    return std::vector<Tensor>{cross_scan(g)};
  });
  return out;
}

Tensor ss2d_scan_merge(const Tensor& x, const Tensor& delta4, const Tensor& A, const Tensor& B4,
                       const Tensor& C4, const Tensor& D) {
  const std::int64_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor u = reshape(cross_scan(x), {nb * 4, c, h * w});
  Tensor y = selective_scan(u, delta4, A, B4, C4, D);
  return cross_merge(reshape(y, {nb, 4, c, h * w}), h, w);
}

S6Params::S6Params(const S6Options& o, Rng& rng) : opts(o) {
  if (o.channels < 1 || o.state_dim < 1 || o.dt_rank < 1) {
    throw ConfigError("S6Params: channels, state_dim and dt_rank must be >= 1");
  }
  const std::int64_t c = o.channels, n = o.state_dim, r = o.dt_rank;
  Tensor xp = Tensor::empty({r + 2 * n, c, 1, 1});
  init_uniform(xp, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  x_proj = register_parameter("x_proj", xp);

  Tensor dw = Tensor::empty({c, r, 1, 1});
  init_uniform(dw, 1.0 / std::sqrt(static_cast<double>(r)), rng);
  dt_weight = register_parameter("dt_weight", dw);

  // softplus(bias) = dt with dt log-uniform in [dt_min, dt_max].
  std::uniform_real_distribution<double> ud(std::log(o.dt_min), std::log(o.dt_max));
  std::vector<double> bias(static_cast<std::size_t>(c));
  for (auto& v : bias) {
    const double dt = std::max(std::exp(ud(rng)), 1e-4);
    v = dt + std::log(-std::expm1(-dt));
  }
  dt_bias = register_parameter("dt_bias", Tensor::from_vector({c}, bias));

  std::vector<double> alog(static_cast<std::size_t>(c * n));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t s = 0; s < n; ++s) alog[static_cast<std::size_t>(ch * n + s)] = std::log(static_cast<double>(s + 1));
  }
  a_log = register_parameter("a_log", Tensor::from_vector({c, n}, alog));
  d_skip = register_parameter("d", Tensor::ones({c}));
}

Tensor S6Params::a_matrix() const { return neg(exp(a_log)); }

SS2D::SS2D(const S6Options& opts, Rng& rng) {
  s6 = register_module("s6", std::make_shared<S6Params>(opts, rng));
  out_norm = register_module("out_norm", std::make_shared<ChannelLayerNorm>(opts.channels));
}

Tensor SS2D::forward(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(1) != s6->opts.channels) {
    throw ContractViolation("SS2D: expected [B," + std::to_string(s6->opts.channels) + ",H,W], got " +
                            to_string(x.shape()));
  }
  const std::int64_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), len = h * w;
  const std::int64_t n = s6->opts.state_dim, r = s6->opts.dt_rank;
  if (len < 1) throw InputError("SS2D: empty feature map");
  Tensor u = reshape(cross_scan(x), {nb * 4, c, len, 1});
  Tensor proj = conv2d(u, s6->x_proj, Tensor());
  Tensor dt_in = slice(proj, 1, 0, r);
  Tensor bm = reshape(slice(proj, 1, r, n), {nb * 4, n, len});
  Tensor cm = reshape(slice(proj, 1, r + n, n), {nb * 4, n, len});
  Tensor delta = reshape(softplus(conv2d(dt_in, s6->dt_weight, s6->dt_bias)), {nb * 4, c, len});
  Tensor y = selective_scan(reshape(u, {nb * 4, c, len}), delta, s6->a_matrix(), bm, cm, s6->d_skip);
  return out_norm->forward(cross_merge(reshape(y, {nb, 4, c, len}), h, w));
}

VSSBlock::VSSBlock(const VSSOptions& o, Rng& rng) {
  if (o.channels < 1 || o.expansion < 1) throw ConfigError("VSSBlock: channels and expansion must be >= 1");
  inner = o.channels * o.expansion;
  const std::int64_t rank = o.dt_rank > 0 ? o.dt_rank : (o.channels + 15) / 16;
  norm = register_module("norm", std::make_shared<ChannelLayerNorm>(o.channels));
  in_proj = register_module("in_proj", std::make_shared<Conv2d>(
                                           Conv2d::Options{o.channels, 2 * inner, 1, {}, false}, o.init, rng));
  InitOptions spatial{InitScheme::kaiming_uniform, 0.0};
  dw_conv = register_module(
      "dw_conv", std::make_shared<Conv2d>(Conv2d::Options{inner, inner, 3, {1, 1, static_cast<int>(inner)}, true},
                                          spatial, rng));
  ss2d = register_module("ss2d", std::make_shared<SS2D>(S6Options{inner, o.state_dim, rank}, rng));
  out_proj = register_module(
      "out_proj", std::make_shared<Conv2d>(Conv2d::Options{inner, o.channels, 1, {}, false}, o.init, rng));
}

Tensor VSSBlock::forward(const Tensor& x) const {
  Tensor p = in_proj->forward(norm->forward(x));
  auto [a, z] = channel_split(p, inner);
  Tensor y = ss2d->forward(silu(dw_conv->forward(a)));
  return add(x, out_proj->forward(mul(y, silu(z))));
}

}  // namespace msu
