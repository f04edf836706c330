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

#include <vector>

#include "trunet/tensor.hpp"

// Differentiable primitives. Every function records a tape node when grad
// mode is on and at least one input requires a gradient. Volumes use the
// [N, C, D, H, W] layout.

namespace trunet::ops {

/// Cross-correlation with a cubic kernel [Cout, Cin, k, k, k]. `bias` may be
/// an undefined tensor.
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, int stride = 1, int padding = 0);

/// Output extent of conv3d/maxpool3d along one axis; throws ConfigError when
/// the result would be empty.
int64_t conv_output_extent(int64_t extent, int kernel, int stride, int padding);

/// Align-corners-false trilinear upsampling by an integer factor.
template <typename T>
BasicTensor<T> trilinear_upsample(const BasicTensor<T>& input, int factor);

/// Batched matrix product. Leading extents of `a` and `b` must be equal, or
/// `b` may be a plain matrix shared across the batch.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x·W + b over the last axis, W: [in, out], b: [out] (optional).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input, int64_t axis);

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Parametric ReLU with a learnable slope per channel (axis 1), or a single
/// shared slope when `alpha` has one element.
template <typename T>
BasicTensor<T> prelu(const BasicTensor<T>& input, const BasicTensor<T>& alpha);

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& input);

/// Elementwise sum. `b` may also have a shape equal to a suffix of `a`'s
/// shape, in which case it is broadcast over the leading axes.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, double factor);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& inputs, int64_t axis);

/// Max pooling with a cubic window; padded positions never win.
template <typename T>
BasicTensor<T> maxpool3d(const BasicTensor<T>& input, int kernel, int stride, int padding = 0);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape);

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& input, const std::vector<int>& order);

/// Sum of all elements as a [1] tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& input);

/// Index of the largest channel per voxel of [N, C, ...]; ties go to the
/// lowest index. Not differentiable. Result has N·spatial entries.
template <typename T>
std::vector<int32_t> argmax_channels(const BasicTensor<T>& input);

}  // namespace trunet::ops
