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
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "trunet/layers.hpp"

namespace trunet {

enum class ModelKind { trunet, res_unet, localizer };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& text);

/// Every architectural hyperparameter of the three networks.
struct ModelConfig {
  ModelKind kind = ModelKind::trunet;
  int64_t input_extent = 224;
  int64_t num_classes = 6;
  double width_multiplier = 1.0;  // CNN widths; ViT dims are set explicitly
  std::array<int, 3> block_depths{3, 4, 9};
  ViTSpec vit;                    // vit.tokens is derived from input_extent
  int64_t patch_extent = 16;      // input voxels per patch edge (= encoder stride)
  std::array<int64_t, 4> decoder_channels{512, 256, 128, 64};
  std::vector<int64_t> unet_channels{16, 32, 64, 128, 256};
  int unet_res_units = 2;
  bool head_upsample = false;

  /// Full-scale TRUNet: 224³ input, ViT-Base dimensions.
  static ModelConfig full_scale();
  /// Desk-scale TRUNet: 32³ input, width 1/8, depths (1, 1, 2), hidden 64,
  /// 4 heads, 2 layers, MLP 128.
  static ModelConfig toy();

  /// Throws ConfigError naming every violated constraint.
  void validate() const;

  /// Channel count after the width multiplier (at least 1).
  int64_t scaled(int64_t channels) const;
  int64_t grid_extent() const { return input_extent / patch_extent; }
  int64_t token_count() const;
  /// Required divisor of input_extent for this kind.
  int64_t extent_divisor() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Structural facts about a built (or declared) network.
struct ArchitectureSummary {
  ModelKind kind = ModelKind::trunet;
  int64_t input_extent = 0;
  int64_t num_classes = 0;
  int64_t parameter_count = 0;
  // trunet
  int64_t tokens = 0;
  int64_t voxels_per_patch = 0;
  int64_t vit_hidden = 0, vit_mlp = 0, vit_heads = 0, vit_layers = 0;
  int encoder_units = 0;
  int64_t encoder_channels = 0;
  std::array<int64_t, 3> skip_channels{};
  std::array<int64_t, 3> skip_extents{};
  std::array<int64_t, 4> decoder_channels{};
  // res_unet / localizer
  int unet_levels = 0;
  int convs_per_unit = 0;
  int kernel_size = 0;
  int stride = 0;
  std::string activation;

  nlohmann::json to_json() const;
};

template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  /// Class probabilities [N, classes, S, S, S] for input [N, 1, S, S, S].
  virtual BasicTensor<T> forward(const BasicTensor<T>& x) const = 0;
};

/// Hybrid encoder → ViT → cascade decoder with skips → segmentation head.
template <typename T>
class TRUNetNetwork : public Network<T> {
 public:
  TRUNetNetwork(ParameterSet<T>& params, const ModelConfig& config);
  BasicTensor<T> forward(const BasicTensor<T>& x) const override;

  /// Token grid [N, hidden, G, G, G] produced by encoder + transformer.
  BasicTensor<T> encode(const BasicTensor<T>& x, SkipSet<T>* skips = nullptr) const;

  ResNetEncoder<T> encoder;
  VitEncoder<T> vit;
  Conv3dLayer<T> entry_conv;
  GroupNormLayer<T> entry_norm;
  std::array<DecoderStage<T>, 4> stages;
  SegmentationHead<T> head;

 private:
  int64_t grid_ = 0;
};

/// Residual U-Net in the MONAI layout: strided residual units down, an
/// unstrided bottom unit, upsample + conv + residual unit on the way up.
template <typename T>
class ResUNetNetwork : public Network<T> {
 public:
  ResUNetNetwork(ParameterSet<T>& params, const ModelConfig& config);
  BasicTensor<T> forward(const BasicTensor<T>& x) const override;

  struct UpLayer {
    Conv3dLayer<T> conv;
    GroupNormLayer<T> norm;
    BasicTensor<T> alpha;
    ResidualUnit<T> unit;
  };

  std::vector<ResidualUnit<T>> down;  // levels 0 .. L-2, stride 2
  ResidualUnit<T> bottom;
  std::vector<UpLayer> up;            // indexed like `down`
};

template <typename T>
class Model {
 public:
  /// Builds and initializes the network described by `config` (validated).
  /// With `allocate = false` only names and shapes are declared.
  Model(const ModelConfig& config, uint64_t seed, bool allocate = true);

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ArchitectureSummary summary() const;

  /// Network internals, for inspection; null for the other kind.
  const TRUNetNetwork<T>* trunet() const { return dynamic_cast<const TRUNetNetwork<T>*>(net_.get()); }
  const ResUNetNetwork<T>* res_unet() const { return dynamic_cast<const ResUNetNetwork<T>*>(net_.get()); }

 private:
  ModelConfig config_;
  ParameterSet<T> params_;
  std::unique_ptr<Network<T>> net_;
};

template <typename T = float>
Model<T> build_trunet(ModelConfig config, uint64_t seed, bool allocate = true);
template <typename T = float>
Model<T> build_res_unet(ModelConfig config, uint64_t seed, bool allocate = true);
/// Residual U-Net on binarized labels: num_classes is forced to 2.
template <typename T = float>
Model<T> build_localizer(ModelConfig config, uint64_t seed, bool allocate = true);
/// Dispatches on config.kind.
template <typename T = float>
Model<T> build_model(const ModelConfig& config, uint64_t seed, bool allocate = true);

}  // namespace trunet
