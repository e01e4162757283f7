// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace msu {

namespace {

thread_local DType g_default_dtype = DType::f32;
bool g_finite_checks = true;
thread_local bool t_grad_enabled = true;

template <class T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ConfigError("unknown dtype '" + name + "'");
}

DType default_dtype() { return g_default_dtype; }
void set_default_dtype(DType dt) { g_default_dtype = dt; }

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ContractViolation("negative extent in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::empty(Shape shape, DType dt) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = static_cast<std::size_t>(msu::numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dt;
  if (dt == DType::f32) {
    impl->f32.resize(n);
  } else {
    impl->f64.resize(n);
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dt) { return full(std::move(shape), 0.0, dt); }
Tensor Tensor::ones(Shape shape, DType dt) { return full(std::move(shape), 1.0, dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = empty(std::move(shape), dt);
  t.fill_(value);
  return t;
}

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& values, DType dt) {
  if (msu::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ContractViolation("from_vector: shape " + to_string(shape) + " needs " +
                            std::to_string(msu::numel(shape)) + " values, got " +
                            std::to_string(values.size()));
  }
  Tensor t = empty(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto out = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractViolation("shape() of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw ContractViolation("axis " + std::to_string(axis) + " out of range for shape " +
                            to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return msu::numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw ContractViolation("dtype() of undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractViolation("item() needs a single element, shape is " + to_string(shape()));
  }
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  if (i < 0 || i >= numel()) throw ContractViolation("flat index out of range");
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]);
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractViolation("set_requires_grad on undefined tensor");
  if (impl_->grad_fn) throw ContractViolation("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return clone();
  Tensor out = empty(shape(), dt);
  dispatch(dtype(), [&](auto src_tag) {
    using S = decltype(src_tag);
    auto src = data<S>();
    dispatch(dt, [&](auto dst_tag) {
      using D = decltype(dst_tag);
      auto dst = out.mutable_data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::fill_(double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::copy_from_(const Tensor& src) {
  if (src.shape() != shape()) {
    throw ContractViolation("copy_from_: shape " + to_string(src.shape()) + " into " +
                            to_string(shape()));
  }
  Tensor conv = src.dtype() == dtype() ? src : src.to(dtype());
  impl_->f32 = conv.impl()->f32;
  impl_->f64 = conv.impl()->f64;
}

namespace detail {

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

void finish(Tensor& out, const char* name, const std::vector<Tensor>& inputs,
            BackwardFn backward) {
  if (finite_checks_enabled()) {
    dispatch(out.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T v : out.data<T>()) {
        if (!std::isfinite(v)) {
          throw NumericError(std::string("non-finite value produced by ") + name +
                             " (output shape " + to_string(out.shape()) + ")");
        }
      }
    });
  }
  if (!grad_enabled() || !any_requires_grad(inputs)) return;
  auto node = std::make_shared<Node>();
  node->name = name;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.defined() ? t.impl_ptr() : nullptr);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

}  // namespace detail

std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& params) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractViolation("gradients: loss must be a scalar, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  NoGradGuard no_grad;

  // Reverse topological order over tensors that carry a grad_fn.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  if (loss.impl()->grad_fn) stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    auto& inputs = impl->grad_fn->inputs;
    if (next < inputs.size()) {
      detail::TensorImpl* child = inputs[next++].get();
      if (child && child->requires_grad && child->grad_fn && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_set<detail::TensorImpl*> wanted;
  for (const auto& p : params) {
    if (p.defined()) wanted.insert(p.impl());
  }

  std::unordered_map<detail::TensorImpl*, Tensor> grads;
  grads[loss.impl()] = Tensor::ones(loss.shape(), loss.dtype());

  auto accumulate = [&](detail::TensorImpl* target, const Tensor& g) {
    auto it = grads.find(target);
    if (it == grads.end()) {
      grads.emplace(target, g);
      return;
    }
    if (it->second.shape() != g.shape()) {
      throw ContractViolation("gradient shape mismatch during accumulation");
    }
    Tensor sum = it->second.clone();
    dispatch(sum.dtype(), [&](auto tag) {
      using T = decltype(tag);
      add_into(sum.impl()->buffer<T>(), g.impl()->buffer<T>());
    });
    it->second = sum;
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    Tensor gout = found->second;
    auto& node = *impl->grad_fn;
    std::vector<Tensor> gins = node.backward(gout);
    if (gins.size() != node.inputs.size()) {
      throw ContractViolation("backward of " + node.name + " returned wrong arity");
    }
    for (std::size_t i = 0; i < gins.size(); ++i) {
      auto* in = node.inputs[i].get();
      if (!in || !in->requires_grad || !gins[i].defined()) continue;
      if (gins[i].shape() != in->shape) {
        throw ContractViolation("backward of " + node.name + " produced gradient of shape " +
                                to_string(gins[i].shape()) + " for input of shape " +
                                to_string(in->shape));
      }
      accumulate(in, gins[i]);
    }
    // Intermediate gradients are no longer needed once propagated.
    if (!wanted.contains(impl)) grads.erase(impl);
  }

  std::vector<Tensor> result;
  result.reserve(params.size());
  for (const auto& p : params) {
    auto it = grads.find(p.impl());
    if (it != grads.end()) {
      result.push_back(it->second);
    } else {
      result.push_back(Tensor::zeros(p.shape(), p.dtype()));
    }
  }
  return result;
}

}  // namespace msu
