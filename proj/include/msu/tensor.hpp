// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "msu/errors.hpp"

namespace msu {

enum class DType : std::uint8_t { f32, f64 };

const char* dtype_name(DType dt);
DType parse_dtype(const std::string& name);

/// Dtype used by factory functions and parameter initialisers. f32 for
/// training, f64 for gradient certification.
DType default_dtype();
void set_default_dtype(DType dt);

class DTypeScope {
 public:
  explicit DTypeScope(DType dt) : saved_(default_dtype()) { set_default_dtype(dt); }
  ~DTypeScope() { set_default_dtype(saved_); }
  DTypeScope(const DTypeScope&) = delete;
  DTypeScope& operator=(const DTypeScope&) = delete;

 private:
  DType saved_;
};

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

/// Graph recording switch (thread local). Disabled inside backward passes and
/// for inference.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// When enabled (the default) every op output is scanned for NaN/Inf.
bool finite_checks_enabled();
void set_finite_checks(bool on);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  template <class T>
  std::vector<T>& buffer() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major array with reverse-mode differentiation support.
///
/// A Tensor is a cheap handle; copies share storage. Values produced by ops
/// are never modified afterwards. Leaves (parameters, buffers) may be updated
/// in place through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, DType dt = default_dtype());
  static Tensor zeros(Shape shape, DType dt = default_dtype());
  static Tensor ones(Shape shape, DType dt = default_dtype());
  static Tensor full(Shape shape, double value, DType dt = default_dtype());
  static Tensor from_vector(Shape shape, const std::vector<double>& values,
                            DType dt = default_dtype());
  static Tensor scalar(double value, DType dt = default_dtype());

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    check_type<T>();
    auto& buf = impl_->buffer<T>();
    return {buf.data(), buf.size()};
  }
  template <class T>
  std::span<T> mutable_data() {
    check_type<T>();
    auto& buf = impl_->buffer<T>();
    return {buf.data(), buf.size()};
  }

  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of values, no graph.
  Tensor clone() const;
  Tensor to(DType dt) const;

  /// Fill in place (leaves only).
  void fill_(double value);
  void copy_from_(const Tensor& src);

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  template <class T>
  void check_type() const {
    if (!impl_) throw ContractViolation("access to undefined tensor");
    constexpr DType want = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    if (impl_->dtype != want) {
      throw ContractViolation(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                              ", accessed as " + dtype_name(want));
    }
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// ∂loss/∂param for every param. Params not connected to the loss get zeros.
/// The loss must hold exactly one element.
std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& params);

namespace detail {

/// Records `out` as produced by `name` from `inputs` when grad mode is on and
/// any input requires grad. Also runs the finite-value check.
void finish(Tensor& out, const char* name, const std::vector<Tensor>& inputs,
            BackwardFn backward);

bool any_requires_grad(const std::vector<Tensor>& inputs);

}  // namespace detail

}  // namespace msu
