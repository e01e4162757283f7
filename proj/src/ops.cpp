// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "msu/debug.hpp"

namespace msu {

namespace debug {

namespace {
std::string g_fault;
}

void inject_gradient_fault(const std::string& op_name) { g_fault = op_name; }
const std::string& gradient_fault() { return g_fault; }
double fault_factor(const char* op_name) { return g_fault == op_name ? 1.01 : 1.0; }

}  // namespace debug

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

using Strides = std::vector<std::int64_t>;

Strides contiguous_strides(const Shape& shape) {
  Strides s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return s;
}

// Strides of `in` viewed as broadcast to `out` (0 along broadcast axes).
Strides broadcast_strides(const Shape& in, const Shape& out) {
  Strides res(out.size(), 0);
  const Strides cs = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1) res[offset + i] = cs[i];
  }
  return res;
}

// Calls f(out_index, offset_a, offset_b) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const std::int64_t total = numel(out);
  const int n = static_cast<int>(out.size());
  if (n == 0) {
    if (total == 1) f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n), 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (int d = n - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      if (++idx[ud] < out[ud]) {
        ia += sa[ud];
        ib += sb[ud];
        break;
      }
      ia -= sa[ud] * (out[ud] - 1);
      ib -= sb[ud] * (out[ud] - 1);
      idx[ud] = 0;
    }
  }
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractViolation(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                            " vs " + dtype_name(b.dtype()) + ")");
  }
}

int normalize_axis(int axis, int ndim, const char* op) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    throw ContractViolation(std::string(op) + ": axis " + std::to_string(axis) +
                            " out of range for rank " + std::to_string(ndim));
  }
  return a;
}

std::weak_ptr<detail::TensorImpl> weak(const Tensor& t) { return t.impl_ptr(); }
Tensor lock(const std::weak_ptr<detail::TensorImpl>& w) { return Tensor(w.lock()); }

// [outer, n, inner] view around `axis`.
struct AxisView {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <class Op>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const char* name, Op op) {
  require_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Tensor out = Tensor::empty(out_shape, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.mutable_data<T>();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = op(pa[i], pb[i]);
    } else if (b.numel() == 1) {
      const T s = pb[0];
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = op(pa[i], s);
    } else {
      for_each_broadcast(out_shape, broadcast_strides(a.shape(), out_shape),
                         broadcast_strides(b.shape(), out_shape),
                         [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                           po[static_cast<std::size_t>(o)] =
                               op(pa[static_cast<std::size_t>(ia)], pb[static_cast<std::size_t>(ib)]);
                         });
    }
  });
  return out;
}

// y = f(x) elementwise; df(x, y) is dy/dx.
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) py[i] = static_cast<T>(f(px[i]));
  });
  auto wy = weak(y);
  detail::finish(y, name, {x}, [x, wy, df](const Tensor& g) {
    Tensor y_saved = lock(wy);
    Tensor gx = Tensor::empty(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto px = x.data<T>();
      auto py = y_saved.data<T>();
      auto pg = g.data<T>();
      auto out = gx.mutable_data<T>();
      for (std::size_t i = 0; i < px.size(); ++i) out[i] = static_cast<T>(pg[i] * df(px[i], py[i]));
    });
    return std::vector<Tensor>{gx};
  });
  return y;
}

template <class T>
T stable_sigmoid(T v) {
  if (v >= 0) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ContractViolation("shapes " + to_string(a) + " and " + to_string(b) +
                              " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ContractViolation("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor out = Tensor::empty(shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for_each_broadcast(shape, broadcast_strides(x.shape(), shape), Strides(shape.size(), 0),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t) {
                         po[static_cast<std::size_t>(o)] = px[static_cast<std::size_t>(ia)];
                       });
  });
  return out;
}

Tensor reduce_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shapes(shape, x.shape()) != x.shape()) {
    throw ContractViolation("cannot reduce " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor out = Tensor::zeros(shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for_each_broadcast(x.shape(), broadcast_strides(shape, x.shape()), Strides(x.shape().size(), 0),
                       [&](std::int64_t o, std::int64_t it, std::int64_t) {
                         po[static_cast<std::size_t>(it)] += px[static_cast<std::size_t>(o)];
                       });
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "add", [](auto x, auto y) { return x + y; });
  detail::finish(out, "add", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{reduce_to(g, sa), reduce_to(g, sb)};
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "sub", [](auto x, auto y) { return x - y; });
  detail::finish(out, "sub", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{reduce_to(g, sa), reduce_to(neg(g), sb)};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "mul", [](auto x, auto y) { return x * y; });
  detail::finish(out, "mul", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = a.requires_grad() ? reduce_to(mul(g, b), a.shape()) : Tensor();
    Tensor gb = b.requires_grad() ? reduce_to(mul(g, a), b.shape()) : Tensor();
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "div", [](auto x, auto y) { return x / y; });
  detail::finish(out, "div", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = a.requires_grad() ? reduce_to(div(g, b), a.shape()) : Tensor();
    Tensor gb = b.requires_grad() ? reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape()) : Tensor();
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](auto v) { return v + static_cast<decltype(v)>(s); },
               [](auto, auto) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, "mul_scalar", [s](auto v) { return v * static_cast<decltype(v)>(s); },
               [s](auto, auto) { return s; });
}

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](auto v) { return -v; }, [](auto, auto) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](auto v) { return std::log(v); },
               [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary(
      x, "pow_scalar",
      [p](auto v) { return std::pow(v, static_cast<decltype(v)>(p)); },
      [p](auto v, auto) {
        using T = decltype(v);
        if (p == 0.0) return T(0);
        return static_cast<T>(p) * std::pow(v, static_cast<T>(p - 1.0));
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp",
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto) {
        using T = decltype(v);
        return (v >= static_cast<T>(lo) && v <= static_cast<T>(hi)) ? T(1) : T(0);
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](auto v) {
        using T = decltype(v);
        return v > T(20) ? v : std::log1p(std::exp(v));
      },
      [](auto v, auto) { return stable_sigmoid(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", [](auto v) { return stable_sigmoid(v); },
               [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor silu(const Tensor& x) {
  return unary(x, "silu", [](auto v) { return v * stable_sigmoid(v); },
               [](auto v, auto) {
                 using T = decltype(v);
                 const T s = stable_sigmoid(v);
                 return s * (T(1) + v * (T(1) - s));
               });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](auto v) { return v > 0 ? v : decltype(v)(0); },
               [](auto v, auto) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::silu: return silu(x);
    case Activation::relu: return relu(x);
  }
  throw ContractViolation("unknown activation");
}

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.ndim(), "softmax");
  const AxisView v = axis_view(x.shape(), a);
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const std::int64_t base = o * v.n * v.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t k = 0; k < v.n; ++k) mx = std::max(mx, px[static_cast<std::size_t>(base + k * v.inner)]);
        T total = 0;
        for (std::int64_t k = 0; k < v.n; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * v.inner);
          py[idx] = std::exp(px[idx] - mx);
          total += py[idx];
        }
        for (std::int64_t k = 0; k < v.n; ++k) py[static_cast<std::size_t>(base + k * v.inner)] /= total;
      }
    }
  });
  auto wy = weak(y);
  detail::finish(y, "softmax", {x}, [wy, a](const Tensor& g) {
    Tensor ys = lock(wy);
    Tensor dot = sum(mul(g, ys), {a}, true);
    return std::vector<Tensor>{mul(ys, sub(g, dot))};
  });
  return y;
}

Tensor sum(const Tensor& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.ndim()));
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes, false);
}

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  Shape keep = x.shape();
  std::vector<bool> reduced(keep.size(), false);
  for (int axis : axes) {
    const int a = normalize_axis(axis, x.ndim(), "sum");
    reduced[static_cast<std::size_t>(a)] = true;
    keep[static_cast<std::size_t>(a)] = 1;
  }
  Shape out_shape;
  if (keepdim) {
    out_shape = keep;
  } else {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (!reduced[i]) out_shape.push_back(keep[i]);
    }
  }
  Tensor r;
  {
    NoGradGuard ng;
    r = reduce_to(x, keep).clone();
  }
  r.impl()->shape = out_shape;
  detail::finish(r, "sum", {x}, [keep, xs = x.shape()](const Tensor& g) {
    Tensor gk = g.clone();
    gk.impl()->shape = keep;
    return std::vector<Tensor>{broadcast_to(gk, xs)};
  });
  return r;
}

Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(std::max<std::int64_t>(x.numel(), 1)));
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  std::int64_t count = 1;
  for (int axis : axes) count *= x.dim(axis);
  return mul_scalar(sum(x, axes, keepdim), 1.0 / static_cast<double>(std::max<std::int64_t>(count, 1)));
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ContractViolation("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (numel(shape) != x.numel()) {
    throw ContractViolation("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out = x.clone();
  out.impl()->shape = shape;
  detail::finish(out, "reshape", {x}, [xs = x.shape()](const Tensor& g) {
    Tensor gx = g.clone();
    gx.impl()->shape = xs;
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int n = x.ndim();
  if (static_cast<int>(perm.size()) != n) throw ContractViolation("permute: rank mismatch");
  std::vector<int> inverse(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= n || inverse[static_cast<std::size_t>(p)] >= 0) {
      throw ContractViolation("permute: invalid permutation");
    }
    inverse[static_cast<std::size_t>(p)] = i;
  }
  const Strides in_strides = contiguous_strides(x.shape());
  Shape out_shape(static_cast<std::size_t>(n));
  Strides gather(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    gather[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  Tensor out = Tensor::empty(out_shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for_each_broadcast(out_shape, gather, Strides(static_cast<std::size_t>(n), 0),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t) {
                         po[static_cast<std::size_t>(o)] = px[static_cast<std::size_t>(ia)];
                       });
  });
  detail::finish(out, "permute", {x}, [inverse](const Tensor& g) {
    return std::vector<Tensor>{permute(g, inverse)};
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int a = normalize_axis(axis, x.ndim(), "slice");
  const AxisView v = axis_view(x.shape(), a);
  if (start < 0 || length < 0 || start + length > v.n) {
    throw ContractViolation("slice: range [" + std::to_string(start) + "," +
                            std::to_string(start + length) + ") outside extent " + std::to_string(v.n));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(a)] = length;
  Tensor out = Tensor::empty(out_shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      std::copy_n(px.begin() + (o * v.n + start) * v.inner, length * v.inner,
                  po.begin() + o * length * v.inner);
    }
  });
  detail::finish(out, "slice", {x}, [xs = x.shape(), a, start, length, v](const Tensor& g) {
    Tensor gx = Tensor::zeros(xs, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::int64_t o = 0; o < v.outer; ++o) {
        std::copy_n(pg.begin() + o * length * v.inner, length * v.inner,
                    po.begin() + (o * v.n + start) * v.inner);
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  const int a = normalize_axis(axis, parts[0].ndim(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype(parts[0], p, "concat");
    if (p.ndim() != parts[0].ndim()) throw ContractViolation("concat: rank mismatch");
    for (int d = 0; d < p.ndim(); ++d) {
      if (d != a && p.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
        throw ContractViolation("concat: shape " + to_string(p.shape()) + " incompatible with " +
                                to_string(parts[0].shape()) + " along non-concat axis");
      }
    }
    total += p.shape()[static_cast<std::size_t>(a)];
  }
  out_shape[static_cast<std::size_t>(a)] = total;
  const AxisView ov = axis_view(out_shape, a);
  Tensor out = Tensor::empty(out_shape, parts[0].dtype());
  std::vector<std::int64_t> offsets;
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto po = out.mutable_data<T>();
    std::int64_t off = 0;
    for (const auto& p : parts) {
      const std::int64_t n = p.shape()[static_cast<std::size_t>(a)];
      auto pp = p.data<T>();
      for (std::int64_t o = 0; o < ov.outer; ++o) {
        std::copy_n(pp.begin() + o * n * ov.inner, n * ov.inner,
                    po.begin() + (o * ov.n + off) * ov.inner);
      }
      offsets.push_back(off);
      off += n;
    }
  });
  std::vector<std::int64_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.shape()[static_cast<std::size_t>(a)]);
  detail::finish(out, "concat", parts, [a, offsets, lengths](const Tensor& g) {
    std::vector<Tensor> gs;
    for (std::size_t i = 0; i < offsets.size(); ++i) gs.push_back(slice(g, a, offsets[i], lengths[i]));
    return gs;
  });
  return out;
}

std::pair<Tensor, Tensor> channel_split(const Tensor& x, std::int64_t k) {
  if (x.ndim() < 2) throw ContractViolation("channel_split: needs [B,C,...]");
  const std::int64_t c = x.dim(1);
  if (k < 1 || k >= c) {
    throw ContractViolation("channel_split: split point " + std::to_string(k) +
                            " must lie in [1," + std::to_string(c) + ")");
  }
  return {slice(x, 1, 0, k), slice(x, 1, k, c - k)};
}

Tensor channel_concat(const std::vector<Tensor>& parts) { return concat(parts, 1); }

Tensor channel_shuffle(const Tensor& x, int groups) {
  if (x.ndim() != 4) throw ContractViolation("channel_shuffle: expects [B,C,H,W]");
  const std::int64_t c = x.dim(1);
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("channel_shuffle: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (groups == 1) return x;
  const auto& s = x.shape();
  Tensor r = reshape(x, {s[0], groups, c / groups, s[2], s[3]});
  return reshape(permute(r, {0, 2, 1, 3, 4}), s);
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::int64_t batch, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo, cin_g, cout_g, k, p;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.p;
        const T* plane = x + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            row[oh * g.wo + ow] =
                (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w) ? plane[ih * g.w + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.p;
        T* plane = x + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.w) plane[ih * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

template <class T>
void conv_forward(const T* x, const T* w, const T* bias, const ConvGeom& g, T* y) {
  if (g.depthwise()) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      for (std::int64_t c = 0; c < g.cout; ++c) {
        const T* plane = x + (b * g.cin + c) * g.h * g.w;
        const T* kern = w + c * g.kh * g.kw;
        T* out = y + (b * g.cout + c) * g.p;
        const T b0 = bias ? bias[c] : T(0);
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            T acc = b0;
            for (std::int64_t ki = 0; ki < g.kh; ++ki) {
              const std::int64_t ih = oh * g.stride - g.pad + ki;
              if (ih < 0 || ih >= g.h) continue;
              for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const std::int64_t iw = ow * g.stride - g.pad + kj;
                if (iw >= 0 && iw < g.w) acc += kern[ki * g.kw + kj] * plane[ih * g.w + iw];
              }
            }
            out[oh * g.wo + ow] = acc;
          }
        }
      }
    }
    return;
  }
  std::vector<T> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.k * g.p));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const T* xg = x + (b * g.cin + gr * g.cin_g) * g.h * g.w;
      const T* src = xg;
      if (!g.pointwise()) {
        im2col(xg, g, col.data());
        src = col.data();
      }
      CMatMap<T> cols(src, g.k, g.p);
      CMatMap<T> wg(w + gr * g.cout_g * g.k, g.cout_g, g.k);
      MatMap<T> yg(y + (b * g.cout + gr * g.cout_g) * g.p, g.cout_g, g.p);
      yg.noalias() = wg * cols;
      if (bias) {
        for (std::int64_t c = 0; c < g.cout_g; ++c) yg.row(c).array() += bias[gr * g.cout_g + c];
      }
    }
  }
}

template <class T>
void conv_backward(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw, T* gb) {
  if (gb) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      for (std::int64_t c = 0; c < g.cout; ++c) {
        const T* row = gy + (b * g.cout + c) * g.p;
        T acc = 0;
        for (std::int64_t i = 0; i < g.p; ++i) acc += row[i];
        gb[c] += acc;
      }
    }
  }
  if (g.depthwise()) {
    for (std::int64_t b = 0; b < g.batch; ++b) {
      for (std::int64_t c = 0; c < g.cout; ++c) {
        const T* plane = x + (b * g.cin + c) * g.h * g.w;
        T* gplane = gx ? gx + (b * g.cin + c) * g.h * g.w : nullptr;
        const T* kern = w + c * g.kh * g.kw;
        T* gkern = gw ? gw + c * g.kh * g.kw : nullptr;
        const T* go = gy + (b * g.cout + c) * g.p;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const T gv = go[oh * g.wo + ow];
            for (std::int64_t ki = 0; ki < g.kh; ++ki) {
              const std::int64_t ih = oh * g.stride - g.pad + ki;
              if (ih < 0 || ih >= g.h) continue;
              for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const std::int64_t iw = ow * g.stride - g.pad + kj;
                if (iw < 0 || iw >= g.w) continue;
                if (gkern) gkern[ki * g.kw + kj] += gv * plane[ih * g.w + iw];
                if (gplane) gplane[ih * g.w + iw] += gv * kern[ki * g.kw + kj];
              }
            }
          }
        }
      }
    }
    return;
  }
  std::vector<T> col;
  std::vector<T> gcol;
  if (!g.pointwise()) {
    col.resize(static_cast<std::size_t>(g.k * g.p));
    gcol.resize(static_cast<std::size_t>(g.k * g.p));
  }
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const T* xg = x + (b * g.cin + gr * g.cin_g) * g.h * g.w;
      CMatMap<T> gyg(gy + (b * g.cout + gr * g.cout_g) * g.p, g.cout_g, g.p);
      CMatMap<T> wg(w + gr * g.cout_g * g.k, g.cout_g, g.k);
      if (gw) {
        const T* src = xg;
        if (!g.pointwise()) {
          im2col(xg, g, col.data());
          src = col.data();
        }
        CMatMap<T> cols(src, g.k, g.p);
        MatMap<T> gwg(gw + gr * g.cout_g * g.k, g.cout_g, g.k);
        gwg.noalias() += gyg * cols.transpose();
      }
      if (gx) {
        T* gxg = gx + (b * g.cin + gr * g.cin_g) * g.h * g.w;
        if (g.pointwise()) {
          MatMap<T> out(gxg, g.k, g.p);
          out.noalias() += wg.transpose() * gyg;
        } else {
          MatMap<T> gc(gcol.data(), g.k, g.p);
          gc.noalias() = wg.transpose() * gyg;
          col2im(gcol.data(), g, gxg);
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  if (x.ndim() != 4 || weight.ndim() != 4) {
    throw ContractViolation("conv2d: expects x [B,C,H,W] and weight [Cout,Cin/g,kH,kW], got " +
                            to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  require_same_dtype(x, weight, "conv2d");
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = opts.stride;
  g.pad = opts.padding;
  g.groups = opts.groups;
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(g.groups) + " must divide Cin=" +
                      std::to_string(g.cin) + " and Cout=" + std::to_string(g.cout));
  }
  if (g.stride < 1 || g.pad < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g) {
    throw ContractViolation("conv2d: weight " + to_string(weight.shape()) + " expects " +
                            std::to_string(weight.dim(1) * g.groups) + " input channels, input has " +
                            std::to_string(g.cin));
  }
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ContractViolation("conv2d: kernel larger than padded input");
  }
  if (bias.defined()) {
    require_same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{g.cout}) throw ContractViolation("conv2d: bias must be [Cout]");
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  g.k = g.cin_g * g.kh * g.kw;
  g.p = g.ho * g.wo;

  Tensor y = Tensor::empty({g.batch, g.cout, g.ho, g.wo}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    conv_forward<T>(x.data<T>().data(), weight.data<T>().data(),
                    bias.defined() ? bias.data<T>().data() : nullptr, g, y.mutable_data<T>().data());
  });
  detail::finish(y, "conv2d", {x, weight, bias}, [x, weight, bias, g](const Tensor& gy) {
    Tensor gx = x.requires_grad() ? Tensor::zeros(x.shape(), x.dtype()) : Tensor();
    Tensor gw = weight.requires_grad() ? Tensor::zeros(weight.shape(), x.dtype()) : Tensor();
    Tensor gb = bias.defined() && bias.requires_grad() ? Tensor::zeros(bias.shape(), x.dtype()) : Tensor();
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      conv_backward<T>(x.data<T>().data(), weight.data<T>().data(), gy.data<T>().data(), g,
                       gx.defined() ? gx.mutable_data<T>().data() : nullptr,
                       gw.defined() ? gw.mutable_data<T>().data() : nullptr,
                       gb.defined() ? gb.mutable_data<T>().data() : nullptr);
      const double f = debug::fault_factor("conv2d");
      if (f != 1.0 && gw.defined()) {
        for (auto& v : gw.mutable_data<T>()) v = static_cast<T>(v * f);
      }
    });
    return std::vector<Tensor>{gx, gw, gb};
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.ndim() < 1 || weight.ndim() != 2 || x.dim(-1) != weight.dim(1)) {
    throw ContractViolation("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                            to_string(weight.shape()));
  }
  require_same_dtype(x, weight, "linear");
  const std::int64_t din = weight.dim(1);
  const std::int64_t dout = weight.dim(0);
  const std::int64_t m = x.numel() / din;
  if (bias.defined() && bias.shape() != Shape{dout}) throw ContractViolation("linear: bias must be [Dout]");
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor y = Tensor::empty(out_shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    CMatMap<T> xm(x.data<T>().data(), m, din);
    CMatMap<T> wm(weight.data<T>().data(), dout, din);
    MatMap<T> ym(y.mutable_data<T>().data(), m, dout);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      auto pb = bias.data<T>();
      for (std::int64_t j = 0; j < dout; ++j) ym.col(j).array() += pb[static_cast<std::size_t>(j)];
    }
  });
  detail::finish(y, "linear", {x, weight, bias}, [x, weight, bias, m, din, dout](const Tensor& gy) {
    Tensor gx = x.requires_grad() ? Tensor::empty(x.shape(), x.dtype()) : Tensor();
    Tensor gw = weight.requires_grad() ? Tensor::empty(weight.shape(), x.dtype()) : Tensor();
    Tensor gb = bias.defined() && bias.requires_grad() ? Tensor::empty(bias.shape(), x.dtype()) : Tensor();
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      CMatMap<T> gym(gy.data<T>().data(), m, dout);
      if (gx.defined()) {
        MatMap<T>(gx.mutable_data<T>().data(), m, din).noalias() =
            gym * CMatMap<T>(weight.data<T>().data(), dout, din);
      }
      if (gw.defined()) {
        MatMap<T>(gw.mutable_data<T>().data(), dout, din).noalias() =
            gym.transpose() * CMatMap<T>(x.data<T>().data(), m, din);
        const double f = debug::fault_factor("linear");
        if (f != 1.0) {
          for (auto& v : gw.mutable_data<T>()) v = static_cast<T>(v * f);
        }
      }
      if (gb.defined()) {
        auto pb = gb.mutable_data<T>();
        for (std::int64_t j = 0; j < dout; ++j) pb[static_cast<std::size_t>(j)] = gym.col(j).sum();
      }
    });
    return std::vector<Tensor>{gx, gw, gb};
  });
  return y;
}

// ---------------------------------------------------------------------------
// Pooling and resampling

namespace {

struct Window {
  std::int64_t begin;
  std::int64_t end;
};

std::vector<Window> adaptive_windows(std::int64_t in, std::int64_t out) {
  std::vector<Window> ws(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    ws[static_cast<std::size_t>(i)] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
  }
  return ws;
}

struct LinearTap {
  std::int64_t i0;
  std::int64_t i1;
  double frac;
};

std::vector<LinearTap> half_pixel_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor pool(const Tensor& x, PoolKind kind, std::int64_t out_h, std::int64_t out_w) {
  if (x.ndim() != 4) throw ContractViolation("pool: expects [B,C,H,W]");
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw ContractViolation("pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                            " exceeds input " + std::to_string(h) + "x" + std::to_string(w));
  }
  const auto rows = adaptive_windows(h, out_h);
  const auto cols = adaptive_windows(w, out_w);
  Tensor y = Tensor::empty({b, c, out_h, out_w}, x.dtype());
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (kind == PoolKind::max) argmax->resize(static_cast<std::size_t>(y.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    for (std::int64_t plane = 0; plane < b * c; ++plane) {
      const std::int64_t base = plane * h * w;
      for (std::int64_t i = 0; i < out_h; ++i) {
        for (std::int64_t j = 0; j < out_w; ++j) {
          const auto& r = rows[static_cast<std::size_t>(i)];
          const auto& q = cols[static_cast<std::size_t>(j)];
          const auto o = static_cast<std::size_t>((plane * out_h + i) * out_w + j);
          if (kind == PoolKind::avg) {
            T acc = 0;
            for (std::int64_t u = r.begin; u < r.end; ++u) {
              for (std::int64_t v = q.begin; v < q.end; ++v) acc += px[static_cast<std::size_t>(base + u * w + v)];
            }
            py[o] = acc / static_cast<T>((r.end - r.begin) * (q.end - q.begin));
          } else {
            std::int64_t best = base + r.begin * w + q.begin;
            for (std::int64_t u = r.begin; u < r.end; ++u) {
              for (std::int64_t v = q.begin; v < q.end; ++v) {
                const std::int64_t idx = base + u * w + v;
                if (px[static_cast<std::size_t>(idx)] > px[static_cast<std::size_t>(best)]) best = idx;
              }
            }
            (*argmax)[o] = best;
            py[o] = px[static_cast<std::size_t>(best)];
          }
        }
      }
    }
  });
  detail::finish(y, kind == PoolKind::avg ? "avg_pool" : "max_pool", {x},
                 [xs = x.shape(), kind, rows, cols, argmax, b, c, h, w, out_h, out_w](const Tensor& g) {
                   Tensor gx = Tensor::zeros(xs, g.dtype());
                   dispatch(g.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto pg = g.data<T>();
                     auto po = gx.mutable_data<T>();
                     if (kind == PoolKind::max) {
                       for (std::size_t o = 0; o < pg.size(); ++o) po[static_cast<std::size_t>((*argmax)[o])] += pg[o];
                       return;
                     }
                     for (std::int64_t plane = 0; plane < b * c; ++plane) {
                       const std::int64_t base = plane * h * w;
                       for (std::int64_t i = 0; i < out_h; ++i) {
                         for (std::int64_t j = 0; j < out_w; ++j) {
                           const auto& r = rows[static_cast<std::size_t>(i)];
                           const auto& q = cols[static_cast<std::size_t>(j)];
                           const T share = pg[static_cast<std::size_t>((plane * out_h + i) * out_w + j)] /
                                           static_cast<T>((r.end - r.begin) * (q.end - q.begin));
                           for (std::int64_t u = r.begin; u < r.end; ++u) {
                             for (std::int64_t v = q.begin; v < q.end; ++v) po[static_cast<std::size_t>(base + u * w + v)] += share;
                           }
                         }
                       }
                     }
                   });
                   return std::vector<Tensor>{gx};
                 });
  return y;
}

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.ndim() != 4) throw ContractViolation("bilinear_resize: expects [B,C,H,W]");
  if (out_h < 1 || out_w < 1) throw ContractViolation("bilinear_resize: output dims must be >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = half_pixel_taps(h, out_h);
  const auto tx = half_pixel_taps(w, out_w);
  Tensor y = Tensor::empty({x.dim(0), x.dim(1), out_h, out_w}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = px.data() + p * h * w;
      T* dst = py.data() + p * out_h * out_w;
      for (std::int64_t i = 0; i < out_h; ++i) {
        const auto& a = ty[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < out_w; ++j) {
          const auto& bt = tx[static_cast<std::size_t>(j)];
          const T top = src[a.i0 * w + bt.i0] * static_cast<T>(1 - bt.frac) + src[a.i0 * w + bt.i1] * static_cast<T>(bt.frac);
          const T bot = src[a.i1 * w + bt.i0] * static_cast<T>(1 - bt.frac) + src[a.i1 * w + bt.i1] * static_cast<T>(bt.frac);
          dst[i * out_w + j] = top * static_cast<T>(1 - a.frac) + bot * static_cast<T>(a.frac);
        }
      }
    }
  });
  detail::finish(y, "bilinear_resize", {x}, [xs = x.shape(), ty, tx, planes, h, w, out_h, out_w](const Tensor& g) {
    Tensor gx = Tensor::zeros(xs, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = pg.data() + p * out_h * out_w;
        T* dst = po.data() + p * h * w;
        for (std::int64_t i = 0; i < out_h; ++i) {
          const auto& a = ty[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < out_w; ++j) {
            const auto& bt = tx[static_cast<std::size_t>(j)];
            const T gv = src[i * out_w + j];
            const T wy0 = static_cast<T>(1 - a.frac), wy1 = static_cast<T>(a.frac);
            const T wx0 = static_cast<T>(1 - bt.frac), wx1 = static_cast<T>(bt.frac);
            dst[a.i0 * w + bt.i0] += gv * wy0 * wx0;
            dst[a.i0 * w + bt.i1] += gv * wy0 * wx1;
            dst[a.i1 * w + bt.i0] += gv * wy1 * wx0;
            dst[a.i1 * w + bt.i1] += gv * wy1 * wx1;
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return y;
}

// ---------------------------------------------------------------------------
// Normalisation

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum, double eps) {
  if (x.ndim() < 2) throw ContractViolation("batch_norm: expects [B,C,...]");
  if (eps <= 0) throw ContractViolation("batch_norm: eps must be positive");
  const std::int64_t nb = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.numel() / std::max<std::int64_t>(nb * c, 1);
  const Shape cs{c};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs) {
    throw ContractViolation("batch_norm: per-channel parameters must have shape [" + std::to_string(c) + "]");
  }
  const std::int64_t count = nb * s;
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    auto pg = gamma.data<T>();
    auto pb = beta.data<T>();
    auto rm = running_mean.mutable_data<T>();
    auto rv = running_var.mutable_data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mu = 0, var = 0;
      if (training) {
        for (std::int64_t b = 0; b < nb; ++b) {
          for (std::int64_t i = 0; i < s; ++i) mu += px[static_cast<std::size_t>((b * c + ch) * s + i)];
        }
        mu /= static_cast<double>(count);
        for (std::int64_t b = 0; b < nb; ++b) {
          for (std::int64_t i = 0; i < s; ++i) {
            const double d = px[static_cast<std::size_t>((b * c + ch) * s + i)] - mu;
            var += d * d;
          }
        }
        const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : var / static_cast<double>(count);
        var /= static_cast<double>(count);
        const auto k = static_cast<std::size_t>(ch);
        rm[k] = static_cast<T>((1 - momentum) * rm[k] + momentum * mu);
        rv[k] = static_cast<T>((1 - momentum) * rv[k] + momentum * unbiased);
      } else {
        mu = rm[static_cast<std::size_t>(ch)];
        var = rv[static_cast<std::size_t>(ch)];
      }
      const double is = 1.0 / std::sqrt(var + eps);
      (*invstd)[static_cast<std::size_t>(ch)] = is;
      for (std::int64_t b = 0; b < nb; ++b) {
        for (std::int64_t i = 0; i < s; ++i) {
          const auto idx = static_cast<std::size_t>((b * c + ch) * s + i);
          const double xh = (px[idx] - mu) * is;
          (*xhat)[idx] = xh;
          py[idx] = static_cast<T>(pg[static_cast<std::size_t>(ch)] * xh + pb[static_cast<std::size_t>(ch)]);
        }
      }
    }
  });
  detail::finish(y, "batch_norm", {x, gamma, beta},
                 [xs = x.shape(), gamma, xhat, invstd, training, nb, c, s, count](const Tensor& g) {
                   Tensor gx = Tensor::empty(xs, g.dtype());
                   Tensor gg = Tensor::empty({c}, g.dtype());
                   Tensor gbeta = Tensor::empty({c}, g.dtype());
                   dispatch(g.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto pgo = g.data<T>();
                     auto pgam = gamma.data<T>();
                     auto pgx = gx.mutable_data<T>();
                     for (std::int64_t ch = 0; ch < c; ++ch) {
                       double sg = 0, sgx = 0;
                       for (std::int64_t b = 0; b < nb; ++b) {
                         for (std::int64_t i = 0; i < s; ++i) {
                           const auto idx = static_cast<std::size_t>((b * c + ch) * s + i);
                           sg += pgo[idx];
                           sgx += pgo[idx] * (*xhat)[idx];
                         }
                       }
                       const auto k = static_cast<std::size_t>(ch);
                       gg.mutable_data<T>()[k] = static_cast<T>(sgx);
                       gbeta.mutable_data<T>()[k] = static_cast<T>(sg);
                       const double scale = pgam[k] * (*invstd)[k];
                       const double n = static_cast<double>(count);
                       for (std::int64_t b = 0; b < nb; ++b) {
                         for (std::int64_t i = 0; i < s; ++i) {
                           const auto idx = static_cast<std::size_t>((b * c + ch) * s + i);
                           if (training) {
                             pgx[idx] = static_cast<T>(scale * (pgo[idx] - sg / n - (*xhat)[idx] * sgx / n));
                           } else {
                             pgx[idx] = static_cast<T>(scale * pgo[idx]);
                           }
                         }
                       }
                     }
                   });
                   return std::vector<Tensor>{gx, gg, gbeta};
                 });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps) {
  const int a = normalize_axis(axis, x.ndim(), "layer_norm");
  if (eps <= 0) throw ContractViolation("layer_norm: eps must be positive");
  const AxisView v = axis_view(x.shape(), a);
  if (gamma.shape() != Shape{v.n} || beta.shape() != Shape{v.n}) {
    throw ContractViolation("layer_norm: scale/shift must have shape [" + std::to_string(v.n) + "]");
  }
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(v.outer * v.inner));
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto py = y.mutable_data<T>();
    auto pg = gamma.data<T>();
    auto pb = beta.data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const std::int64_t base = o * v.n * v.inner + i;
        double mu = 0, var = 0;
        for (std::int64_t k = 0; k < v.n; ++k) mu += px[static_cast<std::size_t>(base + k * v.inner)];
        mu /= static_cast<double>(v.n);
        for (std::int64_t k = 0; k < v.n; ++k) {
          const double d = px[static_cast<std::size_t>(base + k * v.inner)] - mu;
          var += d * d;
        }
        var /= static_cast<double>(v.n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[static_cast<std::size_t>(o * v.inner + i)] = is;
        for (std::int64_t k = 0; k < v.n; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * v.inner);
          const double xh = (px[idx] - mu) * is;
          (*xhat)[idx] = xh;
          py[idx] = static_cast<T>(pg[static_cast<std::size_t>(k)] * xh + pb[static_cast<std::size_t>(k)]);
        }
      }
    }
  });
  detail::finish(y, "layer_norm", {x, gamma, beta}, [xs = x.shape(), gamma, xhat, invstd, v](const Tensor& g) {
    Tensor gx = Tensor::empty(xs, g.dtype());
    Tensor gg = Tensor::zeros({v.n}, g.dtype());
    Tensor gb = Tensor::zeros({v.n}, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pgo = g.data<T>();
      auto pgam = gamma.data<T>();
      auto pgx = gx.mutable_data<T>();
      auto pgg = gg.mutable_data<T>();
      auto pgb = gb.mutable_data<T>();
      const double n = static_cast<double>(v.n);
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const std::int64_t base = o * v.n * v.inner + i;
          double m1 = 0, m2 = 0;
          for (std::int64_t k = 0; k < v.n; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * v.inner);
            const double gh = pgo[idx] * pgam[static_cast<std::size_t>(k)];
            m1 += gh;
            m2 += gh * (*xhat)[idx];
            pgg[static_cast<std::size_t>(k)] += static_cast<T>(pgo[idx] * (*xhat)[idx]);
            pgb[static_cast<std::size_t>(k)] += pgo[idx];
          }
          m1 /= n;
          m2 /= n;
          const double is = (*invstd)[static_cast<std::size_t>(o * v.inner + i)];
          for (std::int64_t k = 0; k < v.n; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * v.inner);
            const double gh = pgo[idx] * pgam[static_cast<std::size_t>(k)];
            pgx[idx] = static_cast<T>(is * (gh - m1 - (*xhat)[idx] * m2));
          }
        }
      }
    });
    return std::vector<Tensor>{gx, gg, gb};
  });
  return y;
}

Tensor space_to_depth(const Tensor& x, int factor) {
  if (x.ndim() != 4) throw ContractViolation("space_to_depth: expects [B,C,H,W]");
  const auto& s = x.shape();
  if (factor < 1 || s[2] % factor != 0 || s[3] % factor != 0) {
    throw InputError("space_to_depth: spatial dims " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " not divisible by " + std::to_string(factor));
  }
  const std::int64_t f = factor;
  Tensor r = reshape(x, {s[0], s[1], s[2] / f, f, s[3] / f, f});
  return reshape(permute(r, {0, 3, 5, 1, 2, 4}), {s[0], f * f * s[1], s[2] / f, s[3] / f});
}

Tensor depth_to_space(const Tensor& x, int factor) {
  if (x.ndim() != 4) throw ContractViolation("depth_to_space: expects [B,C,H,W]");
  const auto& s = x.shape();
  const std::int64_t f = factor;
  if (factor < 1 || s[1] % (f * f) != 0) {
    throw ConfigError("depth_to_space: " + std::to_string(s[1]) + " channels not divisible by " +
                      std::to_string(f * f));
  }
  const std::int64_t c = s[1] / (f * f);
  Tensor r = reshape(x, {s[0], f, f, c, s[2], s[3]});
  return reshape(permute(r, {0, 3, 4, 1, 5, 2}), {s[0], c, s[2] * f, s[3] * f});
}

}  // namespace msu
