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

#include "trunet/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "trunet/error.hpp"
#include "trunet/ops.hpp"

namespace trunet {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::trunet:
      return "trunet";
    case ModelKind::res_unet:
      return "res_unet";
    case ModelKind::localizer:
      return "localizer";
  }
  return "unknown";
}

ModelKind model_kind_from_string(const std::string& text) {
  if (text == "trunet") return ModelKind::trunet;
  if (text == "res_unet" || text == "unet") return ModelKind::res_unet;
  if (text == "localizer") return ModelKind::localizer;
  throw ConfigError("unknown model kind '" + text + "' (expected trunet, res_unet or localizer)");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.vit.tokens = c.token_count();
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.input_extent = 32;
  c.width_multiplier = 0.125;
  c.block_depths = {1, 1, 2};
  c.vit.hidden = 64;
  c.vit.heads = 4;
  c.vit.layers = 2;
  c.vit.mlp = 128;
  c.vit.tokens = c.token_count();
  return c;
}

int64_t ModelConfig::scaled(int64_t channels) const {
  return std::max<int64_t>(1, std::llround(static_cast<double>(channels) * width_multiplier));
}

int64_t ModelConfig::token_count() const {
  if (patch_extent < 1) return 0;
  const int64_t g = input_extent / patch_extent;
  return g * g * g;
}

int64_t ModelConfig::extent_divisor() const {
  if (kind == ModelKind::trunet) return patch_extent;
  const size_t levels = unet_channels.size();
  return levels < 2 ? 1 : int64_t{1} << (levels - 1);
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  const int64_t divisor = extent_divisor();
  if (input_extent < 1) {
    problems.push_back("input_extent must be positive");
  } else if (divisor > 0 && input_extent % divisor != 0) {
    problems.push_back("input_extent " + std::to_string(input_extent) + " is not divisible by " +
                       std::to_string(divisor));
  }
  if (num_classes < 2) problems.push_back("num_classes must be at least 2");
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    problems.push_back("width_multiplier must be positive");
  }
  if (kind == ModelKind::trunet) {
    if (patch_extent != 16) problems.push_back("patch_extent must be 16 (the encoder downsampling factor)");
    for (int d : block_depths) {
      if (d < 1) problems.push_back("block_depths entries must be at least 1");
    }
    if (vit.hidden < 1 || vit.heads < 1 || vit.mlp < 1 || vit.layers < 0) {
      problems.push_back("vit dimensions must be positive");
    } else if (vit.hidden % vit.heads != 0) {
      problems.push_back("vit.hidden " + std::to_string(vit.hidden) + " is not divisible by vit.heads " +
                         std::to_string(vit.heads));
    }
    for (int64_t c : decoder_channels) {
      if (c < 1) problems.push_back("decoder_channels entries must be positive");
    }
    if (width_multiplier > 0.0) {
      for (int64_t c : {256, 512, 1024}) {
        if (scaled(c) % 4 != 0) {
          problems.push_back("scaled encoder width " + std::to_string(scaled(c)) + " is not divisible by 4");
          break;
        }
      }
    }
  } else {
    if (unet_channels.size() < 2) problems.push_back("unet_channels needs at least 2 levels");
    for (int64_t c : unet_channels) {
      if (c < 1) problems.push_back("unet_channels entries must be positive");
    }
    if (unet_res_units < 1) problems.push_back("unet_res_units must be at least 1");
  }
  if (problems.empty()) return;
  std::ostringstream msg;
  msg << "invalid " << to_string(kind) << " config: ";
  for (size_t i = 0; i < problems.size(); ++i) msg << (i ? "; " : "") << problems[i];
  throw ConfigError(msg.str());
}

namespace {

std::string pos_embedding_name(PosEmbedding p) {
  return p == PosEmbedding::zero_init_learnable ? "zero_init_learnable" : "random_init_learnable_1d";
}

PosEmbedding pos_embedding_from(const std::string& text) {
  if (text == "zero_init_learnable" || text == "zero") return PosEmbedding::zero_init_learnable;
  if (text == "random_init_learnable_1d" || text == "random_1d") return PosEmbedding::random_init_learnable_1d;
  throw ConfigError("unknown pos_embedding '" + text + "'");
}

// Accepts a number or a "p/q" string.
double parse_rational(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto text = j.get<std::string>();
    const auto slash = text.find('/');
    try {
      if (slash == std::string::npos) return std::stod(text);
      return std::stod(text.substr(0, slash)) / std::stod(text.substr(slash + 1));
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("width_multiplier must be a number or 'p/q' string, got " + j.dump());
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"input_extent", c.input_extent},
                     {"num_classes", c.num_classes},
                     {"width_multiplier", c.width_multiplier},
                     {"block_depths", c.block_depths},
                     {"vit",
                      {{"hidden", c.vit.hidden},
                       {"mlp", c.vit.mlp},
                       {"heads", c.vit.heads},
                       {"layers", c.vit.layers},
                       {"pos_embedding", pos_embedding_name(c.vit.pos_embedding)}}},
                     {"patch_extent", c.patch_extent},
                     {"decoder_channels", c.decoder_channels},
                     {"unet_channels", c.unet_channels},
                     {"unet_res_units", c.unet_res_units},
                     {"head_upsample", c.head_upsample}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  reject_unknown(j,
                 {"kind", "input_extent", "num_classes", "width_multiplier", "block_depths", "vit", "patch_extent",
                  "decoder_channels", "unet_channels", "unet_res_units", "head_upsample"},
                 "model config");
  if (j.contains("kind")) c.kind = model_kind_from_string(j.at("kind").get<std::string>());
  read(j, "input_extent", c.input_extent);
  read(j, "num_classes", c.num_classes);
  if (j.contains("width_multiplier")) c.width_multiplier = parse_rational(j.at("width_multiplier"));
  read(j, "block_depths", c.block_depths);
  read(j, "patch_extent", c.patch_extent);
  read(j, "decoder_channels", c.decoder_channels);
  read(j, "unet_channels", c.unet_channels);
  read(j, "unet_res_units", c.unet_res_units);
  read(j, "head_upsample", c.head_upsample);
  if (j.contains("vit")) {
    const auto& v = j.at("vit");
    reject_unknown(v, {"hidden", "mlp", "heads", "layers", "pos_embedding", "tokens"}, "vit");
    read(v, "hidden", c.vit.hidden);
    read(v, "mlp", c.vit.mlp);
    read(v, "heads", c.vit.heads);
    read(v, "layers", c.vit.layers);
    if (v.contains("pos_embedding")) c.vit.pos_embedding = pos_embedding_from(v.at("pos_embedding").get<std::string>());
  }
  c.vit.tokens = c.token_count();
}

nlohmann::json ArchitectureSummary::to_json() const {
  nlohmann::json j{{"kind", trunet::to_string(kind)},
                   {"input_extent", input_extent},
                   {"num_classes", num_classes},
                   {"parameter_count", parameter_count}};
  if (kind == ModelKind::trunet) {
    j["tokens"] = tokens;
    j["voxels_per_patch"] = voxels_per_patch;
    j["vit"] = {{"hidden", vit_hidden}, {"mlp", vit_mlp}, {"heads", vit_heads}, {"layers", vit_layers}};
    j["encoder_units"] = encoder_units;
    j["encoder_channels"] = encoder_channels;
    j["skip_channels"] = skip_channels;
    j["skip_extents"] = skip_extents;
    j["decoder_channels"] = decoder_channels;
  } else {
    j["levels"] = unet_levels;
    j["convs_per_unit"] = convs_per_unit;
    j["kernel_size"] = kernel_size;
    j["stride"] = stride;
    j["activation"] = activation;
  }
  return j;
}

// ---------------------------------------------------------------------------

template <typename T>
TRUNetNetwork<T>::TRUNetNetwork(ParameterSet<T>& params, const ModelConfig& c) : grid_(c.grid_extent()) {
  EncoderSpec enc{1, c.scaled(64), {c.scaled(256), c.scaled(512), c.scaled(1024)}, c.block_depths};
  encoder = ResNetEncoder<T>(params, "encoder", enc);
  ViTSpec vs = c.vit;
  vs.tokens = c.token_count();
  vit = VitEncoder<T>(params, "vit", enc.block_channels[2], vs);
  std::array<int64_t, 4> dec;
  for (size_t i = 0; i < 4; ++i) dec[i] = c.scaled(c.decoder_channels[i]);
  entry_conv = Conv3dLayer<T>(params, "decoder.entry.conv", vs.hidden, dec[0], 3, 1, 1, true);
  entry_norm = GroupNormLayer<T>(params, "decoder.entry.norm", dec[0]);
  const std::array<int64_t, 4> skips{enc.block_channels[1], enc.block_channels[0], enc.stem_channels, 0};
  int64_t in = dec[0];
  for (size_t i = 0; i < 4; ++i) {
    const bool up = !(i == 3 && c.head_upsample);
    stages[i] = DecoderStage<T>(params, "decoder.stage" + std::to_string(i + 1), in, skips[i], dec[i], up);
    in = dec[i];
  }
  head = SegmentationHead<T>(params, "head", in, c.num_classes, c.head_upsample);
}

template <typename T>
BasicTensor<T> TRUNetNetwork<T>::encode(const BasicTensor<T>& x, SkipSet<T>* skips) const {
  auto enc = encoder(x);
  if (skips) *skips = enc.skips;
  auto tokens = vit(enc.features);  // [N, T, E]
  const int64_t n = tokens.dim(0), e = tokens.dim(2);
  return ops::reshape(ops::permute(tokens, {0, 2, 1}), {n, e, grid_, grid_, grid_});
}

template <typename T>
BasicTensor<T> TRUNetNetwork<T>::forward(const BasicTensor<T>& x) const {
  SkipSet<T> skips;
  auto h = encode(x, &skips);
  h = ops::relu(entry_norm(entry_conv(h)));
  h = stages[0](h, skips.features[2]);
  h = stages[1](h, skips.features[1]);
  h = stages[2](h, skips.features[0]);
  h = stages[3](h);
  return head(h);
}

template <typename T>
ResUNetNetwork<T>::ResUNetNetwork(ParameterSet<T>& params, const ModelConfig& c) {
  const auto& ch = c.unet_channels;
  const size_t levels = ch.size();
  int64_t in = 1;
  for (size_t i = 0; i + 1 < levels; ++i) {
    down.emplace_back(params, "unet.down" + std::to_string(i), in, ch[i], 2, c.unet_res_units);
    in = ch[i];
  }
  bottom = ResidualUnit<T>(params, "unet.bottom", ch[levels - 2], ch[levels - 1], 1, c.unet_res_units);
  up.resize(levels - 1);
  // Built deepest first so declaration order follows the data flow.
  for (size_t i = levels - 1; i-- > 0;) {
    const int64_t below = (i == levels - 2) ? ch[levels - 1] : ch[i];
    const int64_t out = i == 0 ? c.num_classes : ch[i - 1];
    const std::string name = "unet.up" + std::to_string(i);
    UpLayer& layer = up[i];
    layer.conv = Conv3dLayer<T>(params, name + ".conv", ch[i] + below, out, 3, 1, 1, true);
    layer.norm = GroupNormLayer<T>(params, name + ".norm", out);
    layer.alpha = params.add(name + ".prelu", {out}, Init::prelu_slope);
    layer.unit = ResidualUnit<T>(params, name + ".unit", out, out, 1, 1, i == 0);
  }
}

template <typename T>
BasicTensor<T> ResUNetNetwork<T>::forward(const BasicTensor<T>& x) const {
  const int64_t divisor = int64_t{1} << down.size();
  for (int a = 2; a < 5; ++a) {
    if (x.dim(a) % divisor != 0) {
      throw ConfigError("res_unet input " + shape_to_string(x.shape()) + " is not divisible by " +
                        std::to_string(divisor));
    }
  }
  std::vector<BasicTensor<T>> features;
  auto h = x;
  for (const auto& unit : down) {
    h = unit(h);
    features.push_back(h);
  }
  h = bottom(h);
  for (size_t i = up.size(); i-- > 0;) {
    const auto& layer = up[i];
    h = ops::concat<T>({features[i], h}, 1);
    h = layer.conv(ops::trilinear_upsample(h, 2));
    h = ops::prelu(layer.norm(h), layer.alpha);
    h = layer.unit(h);
  }
  return ops::softmax(h, 1);
}

// ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& config, uint64_t seed, bool allocate) : config_(config), params_(seed, allocate) {
  if (config_.kind == ModelKind::localizer) config_.num_classes = 2;
  config_.vit.tokens = config_.token_count();
  config_.validate();
  if (config_.kind == ModelKind::trunet) {
    net_ = std::make_unique<TRUNetNetwork<T>>(params_, config_);
  } else {
    net_ = std::make_unique<ResUNetNetwork<T>>(params_, config_);
  }
}

template <typename T>
BasicTensor<T> Model<T>::forward(const BasicTensor<T>& x) const {
  if (!params_.allocated()) throw UsageError("model was declared without weights; forward is unavailable");
  if (x.rank() != 5 || x.dim(1) != 1) {
    throw ConfigError("model input must be [N, 1, S, S, S], got " + shape_to_string(x.shape()));
  }
  return net_->forward(x);
}

template <typename T>
ArchitectureSummary Model<T>::summary() const {
  ArchitectureSummary s;
  const auto& c = config_;
  s.kind = c.kind;
  s.input_extent = c.input_extent;
  s.num_classes = c.num_classes;
  s.parameter_count = params_.parameter_count();
  if (const auto* t = trunet()) {
    s.tokens = t->vit.embedding.position.defined() ? t->vit.embedding.position.dim(0) : c.token_count();
    s.voxels_per_patch = c.patch_extent * c.patch_extent * c.patch_extent;
    s.vit_hidden = t->vit.spec.hidden;
    s.vit_mlp = t->vit.spec.mlp;
    s.vit_heads = t->vit.spec.heads;
    s.vit_layers = static_cast<int64_t>(t->vit.layers.size());
    s.encoder_units = t->encoder.unit_count();
    s.encoder_channels = t->encoder.spec.block_channels[2];
    s.skip_channels = {t->encoder.spec.stem_channels, t->encoder.spec.block_channels[0],
                       t->encoder.spec.block_channels[1]};
    s.skip_extents = {c.input_extent / 2, c.input_extent / 4, c.input_extent / 8};
    for (size_t i = 0; i < 4; ++i) s.decoder_channels[i] = c.scaled(c.decoder_channels[i]);
    s.kernel_size = 3;
  } else if (const auto* u = res_unet()) {
    s.unet_levels = static_cast<int>(u->down.size() + 1);
    s.convs_per_unit = static_cast<int>(u->down.front().stages.size());
    s.kernel_size = u->down.front().stages.front().conv.kernel;
    s.stride = u->down.front().stages.front().conv.stride;
    s.activation = "prelu";
  }
  return s;
}

template <typename T>
Model<T> build_trunet(ModelConfig config, uint64_t seed, bool allocate) {
  config.kind = ModelKind::trunet;
  return Model<T>(config, seed, allocate);
}

template <typename T>
Model<T> build_res_unet(ModelConfig config, uint64_t seed, bool allocate) {
  config.kind = ModelKind::res_unet;
  return Model<T>(config, seed, allocate);
}

template <typename T>
Model<T> build_localizer(ModelConfig config, uint64_t seed, bool allocate) {
  config.kind = ModelKind::localizer;
  config.num_classes = 2;
  return Model<T>(config, seed, allocate);
}

template <typename T>
Model<T> build_model(const ModelConfig& config, uint64_t seed, bool allocate) {
  return Model<T>(config, seed, allocate);
}

#define TRUNET_INSTANTIATE_MODEL(T)                                      \
  template class TRUNetNetwork<T>;                                       \
  template class ResUNetNetwork<T>;                                      \
  template class Model<T>;                                               \
  template Model<T> build_trunet<T>(ModelConfig, uint64_t, bool);        \
  template Model<T> build_res_unet<T>(ModelConfig, uint64_t, bool);      \
  template Model<T> build_localizer<T>(ModelConfig, uint64_t, bool);     \
  template Model<T> build_model<T>(const ModelConfig&, uint64_t, bool);

TRUNET_INSTANTIATE_MODEL(float)
TRUNET_INSTANTIATE_MODEL(double)

}  // namespace trunet
