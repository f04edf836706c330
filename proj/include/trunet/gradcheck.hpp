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

#include <functional>
#include <vector>

#include "trunet/tensor.hpp"

namespace trunet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int64_t checked = 0;  // number of scalar entries compared
  bool pass = true;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps), entry by entry over
/// every leaf. Relative error uses the denominator max(|a|, |b|, 1e-8).
GradCheckReport finite_diff_check(const std::function<TensorD()>& f, std::vector<TensorD> leaves, double eps,
                                  double tol);

/// Single-input form: `x` is made a leaf requiring a gradient.
GradCheckReport finite_diff_check(const std::function<TensorD(const TensorD&)>& f, TensorD x, double eps,
                                  double tol);

}  // namespace trunet
