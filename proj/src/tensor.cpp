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

#include "trunet/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "trunet/error.hpp"

namespace trunet {

namespace {
thread_local bool g_grad_enabled = true;
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (int64_t e : shape) {
    if (e <= 0) throw ConfigError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ConfigError("tensor shape " + shape_to_string(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->shape;
}

template <typename T>
int64_t BasicTensor<T>::dim(int64_t axis) const {
  const auto& s = shape();
  const auto r = static_cast<int64_t>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[static_cast<size_t>(axis)];
}

template <typename T>
int64_t BasicTensor<T>::numel() const {
  return static_cast<int64_t>(data().size());
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!impl_) throw UsageError("access to an undefined tensor");
  if (impl_->node) throw UsageError("values of a recorded op output are immutable");
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw UsageError("index rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : index) {
    if (v < 0 || v >= s[i]) throw UsageError("index out of range");
    flat = flat * s[i] + v;
    ++i;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  if (!impl_) throw UsageError("access to an undefined tensor");
  if (impl_->node && !flag) throw UsageError("cannot clear requires_grad on a recorded op output");
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return impl_ && !impl_->node;
}

template <typename T>
bool BasicTensor<T>::has_tape_node() const {
  return impl_ && impl_->node != nullptr;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->grad;
}

template <typename T>
std::vector<T> BasicTensor<T>::grad_values() const {
  if (!has_grad()) return std::vector<T>(data().size(), T(0));
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (!impl_) throw UsageError("backward() on an undefined tensor");
  if (impl_->data.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_to_string(impl_->shape));
  }
  if (!impl_->requires_grad) throw UsageError("loss is not connected to the tape");

  // Post-order DFS gives the tape order: every node after its producers.
  // Owning pointers keep intermediates alive while nodes are released.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, size_t>> stack{{impl_, 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Impl* cur = stack.back().first.get();
    size_t& next = stack.back().second;
    if (cur->node && next < cur->node->inputs.size()) {
      std::shared_ptr<Impl> child = cur->node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      continue;
    }
    order.push_back(std::move(stack.back().first));
    stack.pop_back();
  }

  impl_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* cur = it->get();
    if (!cur->node) continue;
    if (!cur->grad.empty()) cur->node->backward(*cur);
    cur->node.reset();
    if (cur != impl_.get()) {
      cur->grad.clear();
      cur->grad.shrink_to_fit();
    }
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), std::vector<T>(data().begin(), data().end()));
}

namespace detail {

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(const TensorImpl<T>& out)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<TapeNode<T>>();
  node->op = op;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(const TensorImpl<T>& out)> backward) {
  std::vector<BasicTensor<T>> list;
  list.reserve(inputs.size());
  for (const auto* p : inputs) {
    if (p) list.push_back(*p);
  }
  return make_result(op, std::move(shape), std::move(values), list, std::move(backward));
}

}  // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;

template BasicTensor<float> detail::make_result(const char*, Shape, std::vector<float>,
                                                const std::vector<BasicTensor<float>>&,
                                                std::function<void(const TensorImpl<float>&)>);
template BasicTensor<double> detail::make_result(const char*, Shape, std::vector<double>,
                                                 const std::vector<BasicTensor<double>>&,
                                                 std::function<void(const TensorImpl<double>&)>);
template BasicTensor<float> detail::make_result(const char*, Shape, std::vector<float>,
                                                std::initializer_list<const BasicTensor<float>*>,
                                                std::function<void(const TensorImpl<float>&)>);
template BasicTensor<double> detail::make_result(const char*, Shape, std::vector<double>,
                                                 std::initializer_list<const BasicTensor<double>*>,
                                                 std::function<void(const TensorImpl<double>&)>);

}  // namespace trunet
