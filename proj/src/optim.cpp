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

#include "trunet/optim.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

#include "trunet/error.hpp"

namespace trunet {

template <typename T>
AdamState<T>::AdamState(const ParameterSet<T>& params) {
  for (const auto& e : params.entries()) {
    m.emplace_back(static_cast<size_t>(shape_numel(e.shape)), T(0));
    v.emplace_back(static_cast<size_t>(shape_numel(e.shape)), T(0));
  }
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw UsageError("optimizer state does not match the parameter set");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < entries.size(); ++p) {
    BasicTensor<T> tensor = entries[p].tensor;
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != static_cast<size_t>(tensor.numel())) throw UsageError("optimizer moment shape mismatch");
    const auto grad = tensor.grad_values();
    auto theta = tensor.mutable_data();
    for (size_t i = 0; i < m.size(); ++i) {
      const double g = grad[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      theta[i] = static_cast<T>(theta[i] - update);
    }
  }
}

double poly_lr(double base_lr, int64_t iter, int64_t max_iters, double power) {
  if (max_iters <= 0) throw ConfigError("poly_lr needs max_iters > 0");
  if (iter < 0) throw ConfigError("poly_lr iteration must be non-negative");
  if (iter >= max_iters) {
    static std::atomic<bool> warned{false};
    if (iter > max_iters && !warned.exchange(true)) {
      std::cerr << "warning: iteration " << iter << " is past the poly horizon " << max_iters
                << "; learning rate clamped to 0\n";
    }
    return 0.0;
  }
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iters), power);
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(ParameterSet<float>&, AdamState<float>&, double);
template void adam_step<double>(ParameterSet<double>&, AdamState<double>&, double);

}  // namespace trunet
