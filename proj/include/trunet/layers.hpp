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

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "trunet/tensor.hpp"

namespace trunet {

enum class Init {
  zeros,
  ones,
  he_normal,       // N(0, 2 / fan_in)
  xavier_uniform,  // U(±sqrt(6 / (fan_in + fan_out)))
  normal_002,      // N(0, 0.02^2)
  prelu_slope,     // 0.25
};

/// Named learnable tensors in declaration order.
///
/// Values are drawn in double precision from one seeded stream in declaration
/// order, so float and double builds of the same model start from the same
/// point. A set created with `allocate = false` records names and shapes
/// only, which lets full-scale architectures be inspected without
/// materializing their weights.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    BasicTensor<T> tensor;  // undefined when not allocated
  };

  explicit ParameterSet(uint64_t seed = 0, bool allocate = true) : rng_(seed), allocate_(allocate) {}

  BasicTensor<T> add(const std::string& name, Shape shape, Init init, int64_t fan_in = 0, int64_t fan_out = 0);

  const std::vector<Entry>& entries() const { return entries_; }
  bool allocated() const { return allocate_; }
  int64_t parameter_count() const;
  std::vector<BasicTensor<T>> tensors() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::mt19937_64 rng_;
  bool allocate_;
};

/// Group count for the CNN path: 32, clamped to C when C < 32, reduced to
/// gcd(C, 32) when 32 does not divide C.
int norm_groups(int64_t channels);

template <typename T>
struct Conv3dLayer {
  BasicTensor<T> weight, bias;
  int kernel = 1, stride = 1, padding = 0;

  Conv3dLayer() = default;
  Conv3dLayer(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out, int kernel, int stride,
              int padding, bool with_bias = true);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

template <typename T>
struct GroupNormLayer {
  BasicTensor<T> gamma, beta;
  int groups = 1;

  GroupNormLayer() = default;
  GroupNormLayer(ParameterSet<T>& params, const std::string& name, int64_t channels);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

template <typename T>
struct LayerNormLayer {
  BasicTensor<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParameterSet<T>& params, const std::string& name, int64_t width);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

template <typename T>
struct LinearLayer {
  BasicTensor<T> weight, bias;  // weight: [in, out]

  LinearLayer() = default;
  LinearLayer(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

// ---------------------------------------------------------------------------
// Hybrid encoder

struct BottleneckSpec {
  int64_t in_channels = 0;
  int64_t mid_channels = 0;
  int64_t out_channels = 0;
  int stride = 1;

  bool has_projection() const { return stride != 1 || in_channels != out_channels; }
  void validate() const;
};

/// Pre-activation (v2) bottleneck: norm → relu → conv over the 1/3/1 triple,
/// plus an identity or 1³ projection shortcut taken from the pre-activated
/// input. The stride sits on the 3³ convolution.
template <typename T>
struct Bottleneck {
  BottleneckSpec spec;
  GroupNormLayer<T> norm1, norm2, norm3;
  Conv3dLayer<T> conv1, conv2, conv3, projection;

  Bottleneck() = default;
  Bottleneck(ParameterSet<T>& params, const std::string& name, const BottleneckSpec& spec);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

/// Encoder features at /2, /4 and /8 of the input extent.
template <typename T>
struct SkipSet {
  std::array<BasicTensor<T>, 3> features;
};

template <typename T>
struct EncoderOutput {
  BasicTensor<T> features;  // /16
  SkipSet<T> skips;
};

struct EncoderSpec {
  int64_t in_channels = 1;
  int64_t stem_channels = 64;
  std::array<int64_t, 3> block_channels{256, 512, 1024};
  std::array<int, 3> block_depths{3, 4, 9};
};

/// ResNet50-style encoder cut to three blocks: 7³/2 stem conv, norm, relu,
/// 3³/2 max pool, then bottleneck blocks at strides 1, 2, 2.
template <typename T>
struct ResNetEncoder {
  EncoderSpec spec;
  Conv3dLayer<T> stem_conv;
  GroupNormLayer<T> stem_norm;
  std::array<std::vector<Bottleneck<T>>, 3> blocks;
  GroupNormLayer<T> final_norm;

  ResNetEncoder() = default;
  ResNetEncoder(ParameterSet<T>& params, const std::string& name, const EncoderSpec& spec);
  EncoderOutput<T> operator()(const BasicTensor<T>& x) const;
  int unit_count() const;
};

// ---------------------------------------------------------------------------
// Transformer

enum class PosEmbedding {
  zero_init_learnable,       // zeros added to the patch embedding, learnable
  random_init_learnable_1d,  // N(0, 0.02) per flattened token index
};

struct ViTSpec {
  int64_t hidden = 768;
  int64_t mlp = 3072;
  int64_t heads = 12;
  int64_t layers = 12;
  int64_t tokens = 0;
  PosEmbedding pos_embedding = PosEmbedding::zero_init_learnable;

  void validate() const;
};

/// 1³ projection of the encoder grid to `hidden` channels, flattened to
/// tokens in row-major grid order, plus the positional embedding.
template <typename T>
struct PatchEmbed {
  Conv3dLayer<T> projection;
  BasicTensor<T> position;  // [tokens, hidden]

  PatchEmbed() = default;
  PatchEmbed(ParameterSet<T>& params, const std::string& name, int64_t channels, const ViTSpec& spec);
  /// [N, C, G, G, G] → [N, G³, hidden], positional term not yet added.
  BasicTensor<T> embed(const BasicTensor<T>& grid) const;
  BasicTensor<T> add_position(const BasicTensor<T>& tokens) const;
};

template <typename T>
struct MultiHeadAttention {
  int64_t heads = 1;
  LinearLayer<T> query, key, value, out;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<T>& params, const std::string& name, int64_t width, int64_t heads);
  BasicTensor<T> operator()(const BasicTensor<T>& tokens) const;
};

/// Pre-norm transformer layer: x + MHA(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct VitLayer {
  LayerNormLayer<T> attn_norm, mlp_norm;
  MultiHeadAttention<T> attention;
  LinearLayer<T> fc1, fc2;

  VitLayer() = default;
  VitLayer(ParameterSet<T>& params, const std::string& name, const ViTSpec& spec);
  BasicTensor<T> operator()(const BasicTensor<T>& tokens) const;

  static int64_t parameter_count(const ViTSpec& spec);
};

/// Patch embedding, stacked layers and the closing layer norm.
template <typename T>
struct VitEncoder {
  ViTSpec spec;
  PatchEmbed<T> embedding;
  std::vector<VitLayer<T>> layers;
  LayerNormLayer<T> final_norm;

  VitEncoder() = default;
  VitEncoder(ParameterSet<T>& params, const std::string& name, int64_t channels, const ViTSpec& spec);
  /// Runs position add, layers and final norm on already embedded tokens.
  BasicTensor<T> encode(const BasicTensor<T>& tokens) const;
  BasicTensor<T> operator()(const BasicTensor<T>& grid) const;
};

// ---------------------------------------------------------------------------
// Decoder

/// Upsample ×2 (optional), concat skip (optional), 3³ conv, norm, relu.
template <typename T>
struct DecoderStage {
  Conv3dLayer<T> conv;
  GroupNormLayer<T> norm;
  int64_t skip_channels = 0;
  bool upsample = true;

  DecoderStage() = default;
  DecoderStage(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t skip, int64_t out,
               bool upsample = true);
  BasicTensor<T> operator()(const BasicTensor<T>& x, const BasicTensor<T>& skip = {}) const;
};

/// 3³ conv to class scores and softmax over channels; with `upsample` the
/// features are first interpolated ×2.
template <typename T>
struct SegmentationHead {
  Conv3dLayer<T> conv;
  bool upsample = false;

  SegmentationHead() = default;
  SegmentationHead(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t classes,
                   bool upsample = false);
  BasicTensor<T> logits(const BasicTensor<T>& x) const;
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

// ---------------------------------------------------------------------------
// Residual U-Net parts

/// Residual unit of `subunits` conv(3³) → norm → PReLU stages; the first
/// conv carries the stride. Shortcut is identity, or a conv (3³ when
/// strided, 1³ otherwise) when shape changes. With `last_conv_only` the
/// final stage skips norm and activation.
template <typename T>
struct ResidualUnit {
  struct Stage {
    Conv3dLayer<T> conv;
    GroupNormLayer<T> norm;
    BasicTensor<T> alpha;
    bool conv_only = false;
  };
  std::vector<Stage> stages;
  std::optional<Conv3dLayer<T>> shortcut;

  ResidualUnit() = default;
  ResidualUnit(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out, int stride,
               int subunits, bool last_conv_only = false);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

}  // namespace trunet
