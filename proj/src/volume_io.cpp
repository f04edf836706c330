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

#include "trunet/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"
#include "trunet/error.hpp"

namespace trunet {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

namespace {
constexpr char kVolMagic[] = "VOL1";
constexpr size_t kVolMagicSize = 4;
}  // namespace

const char* roi_name(int label) {
  static const char* names[] = {"background", "LV", "LA", "LAA", "AA", "PV"};
  return label >= 0 && label < kNumClasses ? names[label] : "unknown";
}

void LabelVolume::validate(int num_classes) const {
  for (auto e : shape) {
    if (e < 1) throw DataError("label volume extents must be positive");
  }
  if (static_cast<int64_t>(labels.size()) != voxel_count(shape)) {
    throw DataError("label volume has " + std::to_string(labels.size()) + " voxels, shape needs " +
                    std::to_string(voxel_count(shape)));
  }
  for (double s : spacing_mm) {
    if (!(s > 0.0)) throw DataError("voxel spacing must be positive");
  }
  for (uint8_t v : labels) {
    if (v >= num_classes) throw DataError("label value " + std::to_string(v) + " out of range");
  }
}

void VolumeSample::validate() const {
  label_volume().validate();
  if (static_cast<int64_t>(intensity.size()) != voxel_count(shape)) throw DataError("intensity size mismatch");
  for (float v : intensity) {
    if (!std::isfinite(v)) throw DataError("non-finite intensity");
  }
  if (timepoint < 1) throw DataError("timepoint must be >= 1");
}

void save_volume(const VolumeSample& sample, const std::string& path) {
  sample.validate();
  const nlohmann::json header{{"shape", sample.shape},
                              {"spacing_mm", sample.spacing_mm},
                              {"patient_id", sample.patient_id},
                              {"timepoint", sample.timepoint},
                              {"dtype_intensity", "f32"},
                              {"dtype_labels", "u8"}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const uint64_t length = text.size();
  out.write(kVolMagic, kVolMagicSize);
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(sample.intensity.data()),
            static_cast<std::streamsize>(sample.intensity.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(sample.labels.data()), static_cast<std::streamsize>(sample.labels.size()));
  if (!out) throw IoError("write failed for " + path);
}

VolumeSample load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open volume " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kVolMagicSize + 8 || bytes.compare(0, kVolMagicSize, kVolMagic) != 0) {
    throw FormatError(path + ": not a VOL1 file");
  }
  uint64_t length = 0;
  std::memcpy(&length, bytes.data() + kVolMagicSize, sizeof(length));
  const size_t start = kVolMagicSize + 8;
  if (length > bytes.size() - start) throw FormatError(path + ": header length exceeds file size");
  VolumeSample s;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                              bytes.begin() + static_cast<std::ptrdiff_t>(start + length));
    if (header.at("dtype_intensity") != "f32" || header.at("dtype_labels") != "u8") {
      throw FormatError(path + ": unsupported dtypes " + header.at("dtype_intensity").dump() + "/" +
                        header.at("dtype_labels").dump());
    }
    s.shape = header.at("shape").get<Extent3>();
    s.spacing_mm = header.at("spacing_mm").get<Spacing3>();
    s.patient_id = header.at("patient_id").get<int64_t>();
    s.timepoint = header.at("timepoint").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad VOL1 header: " + e.what());
  }
  for (auto e : s.shape) {
    if (e < 1) throw FormatError(path + ": non-positive extent in header");
  }
  const auto voxels = static_cast<uint64_t>(voxel_count(s.shape));
  const uint64_t expected = voxels * (sizeof(float) + 1);
  const uint64_t actual = bytes.size() - start - length;
  if (actual != expected) {
    throw FormatError(path + ": payload has " + std::to_string(actual) + " bytes, expected " +
                      std::to_string(expected) + " (" + std::to_string(voxels) + " f32 + " + std::to_string(voxels) +
                      " u8)");
  }
  const char* payload = bytes.data() + start + length;
  s.intensity.resize(voxels);
  std::memcpy(s.intensity.data(), payload, voxels * sizeof(float));
  s.labels.assign(payload + voxels * sizeof(float), payload + expected);
  try {
    s.validate();
  } catch (const DataError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return s;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "unknown";
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw ConfigError("unknown split '" + text + "' (expected train, val or test)");
}

std::vector<ManifestEntry> Manifest::select(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

std::string Manifest::resolve(const ManifestEntry& entry) const {
  return (std::filesystem::path(directory) / entry.path).string();
}

std::vector<int64_t> Manifest::patients(Split split) const {
  std::set<int64_t> ids;
  for (const auto& e : entries) {
    if (e.split == split) ids.insert(e.patient_id);
  }
  return {ids.begin(), ids.end()};
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    list.push_back({{"path", e.path}, {"patient_id", e.patient_id}, {"timepoint", e.timepoint},
                    {"split", to_string(e.split)}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << list.dump(1) << "\n";
  if (!out) throw IoError("write failed for " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  Manifest m;
  m.directory = std::filesystem::path(path).parent_path().string();
  try {
    const auto list = nlohmann::json::parse(in);
    if (!list.is_array()) throw FormatError(path + ": manifest must be a JSON list");
    for (const auto& item : list) {
      m.entries.push_back({item.at("path").get<std::string>(), item.at("patient_id").get<int64_t>(),
                           item.at("timepoint").get<int64_t>(), split_from_string(item.at("split").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad manifest: " + e.what());
  }
  return m;
}

std::string fnv1a_hex(const void* data, size_t size) {
  uint64_t h = 1469598103934665603ull;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string split_hash(const Manifest& manifest) {
  std::set<std::pair<int64_t, std::string>> pairs;
  for (const auto& e : manifest.entries) pairs.emplace(e.patient_id, to_string(e.split));
  std::string text;
  for (const auto& [id, split] : pairs) text += std::to_string(id) + ":" + split + ";";
  return fnv1a_hex(text.data(), text.size());
}

}  // namespace trunet
