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

#include "trunet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "trunet/error.hpp"

namespace trunet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "TRUNETCKPT1";
constexpr size_t kMagicSize = sizeof(kMagic) - 1;
constexpr int kFormatVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  const float* values;
};

}  // namespace

std::vector<float> flatten_parameters(const Model<float>& model) {
  std::vector<float> out;
  for (const auto& e : model.parameters().entries()) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void save_checkpoint(const Model<float>& model, const std::string& path, int64_t step, const AdamState<float>* adam,
                     const nlohmann::json& extra) {
  const auto& entries = model.parameters().entries();
  if (!model.parameters().allocated()) throw UsageError("cannot checkpoint a model declared without weights");
  std::vector<Record> records;
  for (const auto& e : entries) records.push_back({e.name, e.shape, e.tensor.data().data()});
  if (adam) {
    if (adam->m.size() != entries.size()) throw UsageError("optimizer state does not match the model");
    for (size_t i = 0; i < entries.size(); ++i) records.push_back({"adam.m:" + entries[i].name, entries[i].shape, adam->m[i].data()});
    for (size_t i = 0; i < entries.size(); ++i) records.push_back({"adam.v:" + entries[i].name, entries[i].shape, adam->v[i].data()});
  }

  nlohmann::json names = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& r : records) {
    names.push_back({{"name", r.name}, {"shape", r.shape}, {"offset", offset}});
    offset += static_cast<uint64_t>(shape_numel(r.shape)) * sizeof(float);
  }
  nlohmann::json header{{"format_version", kFormatVersion},
                        {"config", model.config()},
                        {"names", names},
                        {"step", step},
                        {"payload_bytes", offset}};
  if (adam) {
    header["optimizer"] = {{"kind", "adam"}, {"beta1", adam->beta1}, {"beta2", adam->beta2}, {"eps", adam->eps},
                           {"step", adam->step}};
  }
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const uint64_t length = text.size();
  out.write(kMagic, kMagicSize);
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& r : records) {
    out.write(reinterpret_cast<const char*>(r.values), static_cast<std::streamsize>(shape_numel(r.shape) * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path);
}

namespace {

LoadedCheckpoint load_impl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kMagic) != 0) {
    throw FormatError(path + ": bad magic, not a TRUNETCKPT1 checkpoint");
  }
  if (bytes.size() < kMagicSize + 8) throw FormatError(path + ": truncated before header length");
  uint64_t length = 0;
  std::memcpy(&length, bytes.data() + kMagicSize, sizeof(length));
  const size_t header_start = kMagicSize + 8;
  if (length > bytes.size() - header_start) {
    throw FormatError(path + ": header declares " + std::to_string(length) + " bytes but only " +
                      std::to_string(bytes.size() - header_start) + " remain");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(header_start + length));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": header is not valid JSON: " + e.what());
  }
  if (header.value("format_version", 0) != kFormatVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + header.value("format_version", nlohmann::json()).dump());
  }

  ModelConfig config;
  try {
    config = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad config record: " + e.what());
  }
  Model<float> model(config, 0);
  const char* payload = bytes.data() + header_start + length;
  const uint64_t payload_size = bytes.size() - header_start - length;

  const auto& names = header.at("names");
  auto read_record = [&](size_t index, const std::string& expected_name, const Shape& expected_shape, float* dst) {
    if (index >= names.size()) throw FormatError(path + ": missing record '" + expected_name + "'");
    const auto& rec = names[index];
    const auto name = rec.at("name").get<std::string>();
    if (name != expected_name) {
      throw FormatError(path + ": record " + std::to_string(index) + " is '" + name + "', expected '" + expected_name + "'");
    }
    const auto shape = rec.at("shape").get<Shape>();
    if (shape != expected_shape) {
      throw FormatError(path + ": record '" + name + "' has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(expected_shape));
    }
    const uint64_t offset = rec.at("offset").get<uint64_t>();
    const uint64_t count = static_cast<uint64_t>(shape_numel(shape)) * sizeof(float);
    if (offset + count > payload_size) {
      throw FormatError(path + ": record '" + name + "' needs payload bytes up to " + std::to_string(offset + count) +
                        " but the payload has " + std::to_string(payload_size));
    }
    std::memcpy(dst, payload + offset, count);
  };

  const auto& entries = model.parameters().entries();
  size_t index = 0;
  for (const auto& e : entries) {
    BasicTensor<float> t = e.tensor;
    read_record(index++, e.name, e.shape, t.mutable_data().data());
  }
  LoadedCheckpoint result{std::move(model), header.value("step", int64_t{0}), std::nullopt,
                          header.contains("extra") ? header.at("extra") : nlohmann::json()};
  if (header.contains("optimizer")) {
    const auto& o = header.at("optimizer");
    const auto& moved = result.model.parameters().entries();
    AdamState<float> adam(result.model.parameters());
    adam.beta1 = o.at("beta1").get<double>();
    adam.beta2 = o.at("beta2").get<double>();
    adam.eps = o.at("eps").get<double>();
    adam.step = o.at("step").get<int64_t>();
    for (size_t i = 0; i < moved.size(); ++i) read_record(index++, "adam.m:" + moved[i].name, moved[i].shape, adam.m[i].data());
    for (size_t i = 0; i < moved.size(); ++i) read_record(index++, "adam.v:" + moved[i].name, moved[i].shape, adam.v[i].data());
    result.adam = std::move(adam);
  }
  if (index != names.size()) {
    throw FormatError(path + ": unexpected extra record '" + names[index].at("name").get<std::string>() + "'");
  }
  const uint64_t declared = header.value("payload_bytes", payload_size);
  if (declared != payload_size) {
    throw FormatError(path + ": payload is " + std::to_string(payload_size) + " bytes, header declares " +
                      std::to_string(declared));
  }
  return result;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  try {
    return load_impl(path);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
}

}  // namespace trunet
