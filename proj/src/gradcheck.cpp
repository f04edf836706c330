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

#include "trunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace trunet {

GradCheckReport finite_diff_check(const std::function<TensorD()>& f, std::vector<TensorD> leaves, double eps,
                                  double tol) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad_values());

  GradCheckReport report;
  NoGradGuard no_grad;
  for (size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[l][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      report.max_rel_err = std::max(report.max_rel_err, rel_err);
      ++report.checked;
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  report.pass = report.max_rel_err <= tol;
  return report;
}

GradCheckReport finite_diff_check(const std::function<TensorD(const TensorD&)>& f, TensorD x, double eps,
                                  double tol) {
  return finite_diff_check([&] { return f(x); }, {x}, eps, tol);
}

}  // namespace trunet
