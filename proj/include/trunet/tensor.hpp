/*
 * Copyright (c) 2026 The trunet3d Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trunet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded operation. `inputs` drives the topological traversal; the
// backward rule reads the output gradient and accumulates into whichever
// inputs require a gradient.
template <typename T>
struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Whether operations currently record onto the tape (thread-local).
bool grad_enabled();

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with shared storage.
///
/// Copies are cheap handles onto the same storage. Values are immutable once
/// an operation has produced them; only leaves (parameters, inputs) expose
/// mutable access, which the optimizer and the gradient checker use.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit BasicTensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  /// Extent of `axis`; negative values count from the back.
  int64_t dim(int64_t axis) const;
  int64_t numel() const;

  std::span<const T> data() const;
  /// Mutable view of a leaf's values. Throws UsageError on tape outputs.
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_tape_node() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  /// Gradient values, or zeros when nothing has been accumulated.
  std::vector<T> grad_values() const;
  void zero_grad();

  /// Reverse-mode propagation from this scalar. The recorded tape is freed
  /// afterwards; leaf gradients accumulate across calls until zero_grad().
  void backward() const;

  /// Copy of the values without tape history.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> values(data().begin(), data().end());
    return BasicTensor<U>(shape(), std::move(values));
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

// Builds an op result. When recording is enabled and any input requires a
// gradient, the result gets a tape node holding `backward`.
template <typename T>
BasicTensor<T> make_result(
    const char* op, Shape shape, std::vector<T> values,
    std::initializer_list<const BasicTensor<T>*> inputs,
    std::function<void(const TensorImpl<T>& out)> backward);

template <typename T>
BasicTensor<T> make_result(
    const char* op, Shape shape, std::vector<T> values,
    const std::vector<BasicTensor<T>>& inputs,
    std::function<void(const TensorImpl<T>& out)> backward);

/// True when `t` is defined and wants a gradient from the current op.
template <typename T>
bool wants_grad(const BasicTensor<T>& t) {
  return t.defined() && t.requires_grad() && grad_enabled();
}

}  // namespace detail

}  // namespace trunet
