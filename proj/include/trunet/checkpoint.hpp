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

#include <optional>
#include <string>

#include "json.hpp"
#include "trunet/model.hpp"
#include "trunet/optim.hpp"

namespace trunet {

struct LoadedCheckpoint {
  Model<float> model;
  int64_t step = 0;
  std::optional<AdamState<float>> adam;
  nlohmann::json extra;  // caller-defined metadata, null when absent
};

/// Writes "TRUNETCKPT1", a u64 little-endian header length, the JSON header
/// {config, names:[{name, shape, offset}], step, ...} and the f32 payload.
/// Offsets are byte offsets into the payload. Adam moments, when given, are
/// stored as extra records named "adam.m:<param>" and "adam.v:<param>".
void save_checkpoint(const Model<float>& model, const std::string& path, int64_t step = 0,
                     const AdamState<float>* adam = nullptr, const nlohmann::json& extra = nullptr);

/// Rebuilds the model from the stored config and fills every parameter.
/// Throws IoError when the file cannot be read and FormatError naming the
/// first offending record for bad magic, truncation or name/shape mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path);

/// Bytes of the stored parameter payload; handy for equality checks.
std::vector<float> flatten_parameters(const Model<float>& model);

}  // namespace trunet
