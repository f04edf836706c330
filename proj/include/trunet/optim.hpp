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
#include <vector>

#include "trunet/layers.hpp"

namespace trunet {

/// Adam moments for a ParameterSet, one flat buffer per parameter in
/// declaration order.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  AdamState() = default;
  explicit AdamState(const ParameterSet<T>& params);
};

/// One bias-corrected Adam update using the gradients currently stored on
/// the parameters (missing gradients count as zero).
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr);

/// base_lr · (1 − iter/max_iters)^power. Iterations past the horizon return
/// 0 and log a warning once.
double poly_lr(double base_lr, int64_t iter, int64_t max_iters, double power);

}  // namespace trunet
