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

#include "trunet/layers.hpp"

#include <cmath>
#include <numeric>

#include "trunet/error.hpp"
#include "trunet/ops.hpp"

namespace trunet {

template <typename T>
BasicTensor<T> ParameterSet<T>::add(const std::string& name, Shape shape, Init init, int64_t fan_in,
                                    int64_t fan_out) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ConfigError("duplicate parameter name " + name);
  }
  BasicTensor<T> tensor;
  if (allocate_) {
    std::vector<T> values(static_cast<size_t>(shape_numel(shape)));
    switch (init) {
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case Init::prelu_slope:
        std::fill(values.begin(), values.end(), T(0.25));
        break;
      case Init::he_normal: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : values) v = static_cast<T>(dist(rng_));
        break;
      }
      case Init::xavier_uniform: {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : values) v = static_cast<T>(dist(rng_));
        break;
      }
      case Init::normal_002: {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& v : values) v = static_cast<T>(dist(rng_));
        break;
      }
    }
    tensor = BasicTensor<T>(shape, std::move(values), true);
  }
  entries_.push_back({name, std::move(shape), tensor});
  return tensor;
}

template <typename T>
int64_t ParameterSet<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += shape_numel(e.shape);
  return n;
}

template <typename T>
std::vector<BasicTensor<T>> ParameterSet<T>::tensors() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) {
    if (e.tensor.defined()) e.tensor.zero_grad();
  }
}

int norm_groups(int64_t channels) {
  if (channels < 32) return static_cast<int>(channels);
  return std::gcd(static_cast<int>(channels), 32);
}

// ---------------------------------------------------------------------------

template <typename T>
Conv3dLayer<T>::Conv3dLayer(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out, int k,
                            int s, int p, bool with_bias)
    : kernel(k), stride(s), padding(p) {
  const int64_t fan_in = in * k * k * k;
  weight = params.add(name + ".weight", {out, in, k, k, k}, Init::he_normal, fan_in);
  if (with_bias) bias = params.add(name + ".bias", {out}, Init::zeros);
}

template <typename T>
BasicTensor<T> Conv3dLayer<T>::operator()(const BasicTensor<T>& x) const {
  return ops::conv3d(x, weight, bias, stride, padding);
}

template <typename T>
GroupNormLayer<T>::GroupNormLayer(ParameterSet<T>& params, const std::string& name, int64_t channels)
    : groups(norm_groups(channels)) {
  gamma = params.add(name + ".gamma", {channels}, Init::ones);
  beta = params.add(name + ".beta", {channels}, Init::zeros);
}

template <typename T>
BasicTensor<T> GroupNormLayer<T>::operator()(const BasicTensor<T>& x) const {
  return ops::group_norm(x, groups, gamma, beta, 1e-5);
}

template <typename T>
LayerNormLayer<T>::LayerNormLayer(ParameterSet<T>& params, const std::string& name, int64_t width) {
  gamma = params.add(name + ".gamma", {width}, Init::ones);
  beta = params.add(name + ".beta", {width}, Init::zeros);
}

template <typename T>
BasicTensor<T> LayerNormLayer<T>::operator()(const BasicTensor<T>& x) const {
  return ops::layer_norm(x, gamma, beta, 1e-5);
}

template <typename T>
LinearLayer<T>::LinearLayer(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out) {
  weight = params.add(name + ".weight", {in, out}, Init::xavier_uniform, in, out);
  bias = params.add(name + ".bias", {out}, Init::zeros);
}

template <typename T>
BasicTensor<T> LinearLayer<T>::operator()(const BasicTensor<T>& x) const {
  return ops::linear(x, weight, bias);
}

// ---------------------------------------------------------------------------

void BottleneckSpec::validate() const {
  if (in_channels < 1 || mid_channels < 1) throw ConfigError("bottleneck channels must be positive");
  if (out_channels != 4 * mid_channels) {
    throw ConfigError("bottleneck out_channels (" + std::to_string(out_channels) + ") must be 4 x mid_channels (" +
                      std::to_string(mid_channels) + ")");
  }
  if (stride != 1 && stride != 2) throw ConfigError("bottleneck stride must be 1 or 2");
}

template <typename T>
Bottleneck<T>::Bottleneck(ParameterSet<T>& params, const std::string& name, const BottleneckSpec& s) : spec(s) {
  spec.validate();
  norm1 = GroupNormLayer<T>(params, name + ".norm1", spec.in_channels);
  conv1 = Conv3dLayer<T>(params, name + ".conv1", spec.in_channels, spec.mid_channels, 1, 1, 0, false);
  norm2 = GroupNormLayer<T>(params, name + ".norm2", spec.mid_channels);
  conv2 = Conv3dLayer<T>(params, name + ".conv2", spec.mid_channels, spec.mid_channels, 3, spec.stride, 1, false);
  norm3 = GroupNormLayer<T>(params, name + ".norm3", spec.mid_channels);
  conv3 = Conv3dLayer<T>(params, name + ".conv3", spec.mid_channels, spec.out_channels, 1, 1, 0, false);
  if (spec.has_projection()) {
    projection = Conv3dLayer<T>(params, name + ".projection", spec.in_channels, spec.out_channels, 1, spec.stride, 0,
                                false);
  }
}

template <typename T>
BasicTensor<T> Bottleneck<T>::operator()(const BasicTensor<T>& x) const {
  if (x.dim(1) != spec.in_channels) {
    throw ConfigError("bottleneck expects " + std::to_string(spec.in_channels) + " channels, got " +
                      std::to_string(x.dim(1)));
  }
  auto pre = ops::relu(norm1(x));
  auto shortcut = spec.has_projection() ? projection(pre) : x;
  auto h = conv1(pre);
  h = conv2(ops::relu(norm2(h)));
  h = conv3(ops::relu(norm3(h)));
  return ops::add(shortcut, h);
}

template <typename T>
ResNetEncoder<T>::ResNetEncoder(ParameterSet<T>& params, const std::string& name, const EncoderSpec& s) : spec(s) {
  stem_conv = Conv3dLayer<T>(params, name + ".stem.conv", spec.in_channels, spec.stem_channels, 7, 2, 3, false);
  stem_norm = GroupNormLayer<T>(params, name + ".stem.norm", spec.stem_channels);
  int64_t in = spec.stem_channels;
  for (size_t b = 0; b < 3; ++b) {
    const int64_t out = spec.block_channels[b];
    if (out % 4 != 0) throw ConfigError("encoder block width must be divisible by 4");
    if (spec.block_depths[b] < 1) throw ConfigError("encoder block depth must be >= 1");
    for (int u = 0; u < spec.block_depths[b]; ++u) {
      BottleneckSpec unit{in, out / 4, out, (u == 0 && b > 0) ? 2 : 1};
      blocks[b].emplace_back(params, name + ".block" + std::to_string(b + 1) + ".unit" + std::to_string(u), unit);
      in = out;
    }
  }
  final_norm = GroupNormLayer<T>(params, name + ".final_norm", in);
}

template <typename T>
EncoderOutput<T> ResNetEncoder<T>::operator()(const BasicTensor<T>& x) const {
  const int64_t extent = x.dim(2);
  if (extent % 16 != 0 || x.dim(3) % 16 != 0 || x.dim(4) % 16 != 0) {
    throw ConfigError("encoder input extent " + shape_to_string(x.shape()) + " is not divisible by 16");
  }
  EncoderOutput<T> out;
  auto h = ops::relu(stem_norm(stem_conv(x)));
  out.skips.features[0] = h;
  h = ops::maxpool3d(h, 3, 2, 1);
  for (size_t b = 0; b < 3; ++b) {
    for (const auto& unit : blocks[b]) h = unit(h);
    if (b < 2) out.skips.features[b + 1] = h;
  }
  out.features = ops::relu(final_norm(h));
  return out;
}

template <typename T>
int ResNetEncoder<T>::unit_count() const {
  return static_cast<int>(blocks[0].size() + blocks[1].size() + blocks[2].size());
}

// ---------------------------------------------------------------------------

void ViTSpec::validate() const {
  if (hidden < 1 || heads < 1 || mlp < 1 || layers < 0) throw ConfigError("ViT dimensions must be positive");
  if (hidden % heads != 0) {
    throw ConfigError("ViT hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
}

template <typename T>
PatchEmbed<T>::PatchEmbed(ParameterSet<T>& params, const std::string& name, int64_t channels, const ViTSpec& spec) {
  projection = Conv3dLayer<T>(params, name + ".projection", channels, spec.hidden, 1, 1, 0, true);
  position = params.add(name + ".position", {spec.tokens, spec.hidden},
                        spec.pos_embedding == PosEmbedding::zero_init_learnable ? Init::zeros : Init::normal_002);
}

template <typename T>
BasicTensor<T> PatchEmbed<T>::embed(const BasicTensor<T>& grid) const {
  auto h = projection(grid);
  const int64_t n = h.dim(0), e = h.dim(1);
  const int64_t tokens = h.numel() / (n * e);
  return ops::permute(ops::reshape(h, {n, e, tokens}), {0, 2, 1});
}

template <typename T>
BasicTensor<T> PatchEmbed<T>::add_position(const BasicTensor<T>& tokens) const {
  if (tokens.dim(1) != position.dim(0)) {
    throw ConfigError("token count " + std::to_string(tokens.dim(1)) + " differs from positional table size " +
                      std::to_string(position.dim(0)));
  }
  return ops::add(tokens, position);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParameterSet<T>& params, const std::string& name, int64_t width,
                                          int64_t h)
    : heads(h) {
  if (width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  query = LinearLayer<T>(params, name + ".query", width, width);
  key = LinearLayer<T>(params, name + ".key", width, width);
  value = LinearLayer<T>(params, name + ".value", width, width);
  out = LinearLayer<T>(params, name + ".out", width, width);
}

template <typename T>
BasicTensor<T> MultiHeadAttention<T>::operator()(const BasicTensor<T>& tokens) const {
  const int64_t n = tokens.dim(0), t = tokens.dim(1), e = tokens.dim(2);
  const int64_t d = e / heads;
  auto split = [&](const BasicTensor<T>& x) { return ops::permute(ops::reshape(x, {n, t, heads, d}), {0, 2, 1, 3}); };
  auto q = split(query(tokens));
  auto k = ops::permute(ops::reshape(key(tokens), {n, t, heads, d}), {0, 2, 3, 1});  // [n, h, d, t]
  auto v = split(value(tokens));
  auto scores = ops::scale(ops::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  auto weights = ops::softmax(scores, -1);
  auto ctx = ops::matmul(weights, v);  // [n, h, t, d]
  auto merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {n, t, e});
  return out(merged);
}

template <typename T>
VitLayer<T>::VitLayer(ParameterSet<T>& params, const std::string& name, const ViTSpec& spec) {
  attn_norm = LayerNormLayer<T>(params, name + ".attn_norm", spec.hidden);
  attention = MultiHeadAttention<T>(params, name + ".attn", spec.hidden, spec.heads);
  mlp_norm = LayerNormLayer<T>(params, name + ".mlp_norm", spec.hidden);
  fc1 = LinearLayer<T>(params, name + ".mlp.fc1", spec.hidden, spec.mlp);
  fc2 = LinearLayer<T>(params, name + ".mlp.fc2", spec.mlp, spec.hidden);
}

template <typename T>
BasicTensor<T> VitLayer<T>::operator()(const BasicTensor<T>& tokens) const {
  auto x = ops::add(tokens, attention(attn_norm(tokens)));
  return ops::add(x, fc2(ops::gelu(fc1(mlp_norm(x)))));
}

template <typename T>
int64_t VitLayer<T>::parameter_count(const ViTSpec& spec) {
  ParameterSet<T> shapes(0, false);
  VitLayer<T>(shapes, "layer", spec);
  return shapes.parameter_count();
}

template <typename T>
VitEncoder<T>::VitEncoder(ParameterSet<T>& params, const std::string& name, int64_t channels, const ViTSpec& s)
    : spec(s) {
  spec.validate();
  embedding = PatchEmbed<T>(params, name + ".embedding", channels, spec);
  for (int64_t l = 0; l < spec.layers; ++l) layers.emplace_back(params, name + ".layer" + std::to_string(l), spec);
  final_norm = LayerNormLayer<T>(params, name + ".final_norm", spec.hidden);
}

template <typename T>
BasicTensor<T> VitEncoder<T>::encode(const BasicTensor<T>& tokens) const {
  auto x = embedding.add_position(tokens);
  for (const auto& layer : layers) x = layer(x);
  return final_norm(x);
}

template <typename T>
BasicTensor<T> VitEncoder<T>::operator()(const BasicTensor<T>& grid) const {
  return encode(embedding.embed(grid));
}

// ---------------------------------------------------------------------------

template <typename T>
DecoderStage<T>::DecoderStage(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t skip,
                              int64_t out, bool up)
    : skip_channels(skip), upsample(up) {
  conv = Conv3dLayer<T>(params, name + ".conv", in + skip, out, 3, 1, 1, true);
  norm = GroupNormLayer<T>(params, name + ".norm", out);
}

template <typename T>
BasicTensor<T> DecoderStage<T>::operator()(const BasicTensor<T>& x, const BasicTensor<T>& skip) const {
  auto h = upsample ? ops::trilinear_upsample(x, 2) : x;
  if (skip_channels > 0) {
    if (!skip.defined()) throw ConfigError("decoder stage expects a skip tensor");
    for (int a = 2; a < 5; ++a) {
      if (skip.dim(a) != h.dim(a)) {
        throw ConfigError("skip extent " + shape_to_string(skip.shape()) + " does not match upsampled " +
                          shape_to_string(h.shape()));
      }
    }
    if (skip.dim(1) != skip_channels) throw ConfigError("skip channel count mismatch");
    h = ops::concat<T>({h, skip}, 1);
  }
  return ops::relu(norm(conv(h)));
}

template <typename T>
SegmentationHead<T>::SegmentationHead(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t classes,
                                      bool up)
    : upsample(up) {
  conv = Conv3dLayer<T>(params, name + ".conv", in, classes, 3, 1, 1, true);
}

template <typename T>
BasicTensor<T> SegmentationHead<T>::logits(const BasicTensor<T>& x) const {
  return conv(upsample ? ops::trilinear_upsample(x, 2) : x);
}

template <typename T>
BasicTensor<T> SegmentationHead<T>::operator()(const BasicTensor<T>& x) const {
  return ops::softmax(logits(x), 1);
}

// ---------------------------------------------------------------------------

template <typename T>
ResidualUnit<T>::ResidualUnit(ParameterSet<T>& params, const std::string& name, int64_t in, int64_t out, int stride,
                              int subunits, bool last_conv_only) {
  if (subunits < 1) throw ConfigError("residual unit needs at least one subunit");
  int64_t c = in;
  for (int s = 0; s < subunits; ++s) {
    Stage stage;
    const std::string prefix = name + ".sub" + std::to_string(s);
    stage.conv = Conv3dLayer<T>(params, prefix + ".conv", c, out, 3, s == 0 ? stride : 1, 1, true);
    stage.conv_only = last_conv_only && s == subunits - 1;
    if (!stage.conv_only) {
      stage.norm = GroupNormLayer<T>(params, prefix + ".norm", out);
      stage.alpha = params.add(prefix + ".prelu", {out}, Init::prelu_slope);
    }
    stages.push_back(std::move(stage));
    c = out;
  }
  if (stride != 1 || in != out) {
    const int k = stride != 1 ? 3 : 1;
    shortcut.emplace(params, name + ".residual", in, out, k, stride, k / 2, true);
  }
}

template <typename T>
BasicTensor<T> ResidualUnit<T>::operator()(const BasicTensor<T>& x) const {
  auto h = x;
  for (const auto& stage : stages) {
    h = stage.conv(h);
    if (!stage.conv_only) h = ops::prelu(stage.norm(h), stage.alpha);
  }
  return ops::add(shortcut ? (*shortcut)(x) : x, h);
}

#define TRUNET_INSTANTIATE_LAYERS(T) \
  template class ParameterSet<T>;    \
  template struct Conv3dLayer<T>;    \
  template struct GroupNormLayer<T>; \
  template struct LayerNormLayer<T>; \
  template struct LinearLayer<T>;    \
  template struct Bottleneck<T>;     \
  template struct ResNetEncoder<T>;  \
  template struct PatchEmbed<T>;     \
  template struct MultiHeadAttention<T>; \
  template struct VitLayer<T>;       \
  template struct VitEncoder<T>;     \
  template struct DecoderStage<T>;   \
  template struct SegmentationHead<T>; \
  template struct ResidualUnit<T>;

TRUNET_INSTANTIATE_LAYERS(float)
TRUNET_INSTANTIATE_LAYERS(double)

}  // namespace trunet
