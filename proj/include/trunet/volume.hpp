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
#include <string>
#include <vector>

namespace trunet {

using Extent3 = std::array<int64_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Label ids of the phantom and metric code.
enum Roi : uint8_t { background = 0, lv = 1, la = 2, laa = 3, aa = 4, pv = 5 };
inline constexpr int kNumClasses = 6;
inline constexpr int kNumRois = 5;
const char* roi_name(int label);

inline int64_t voxel_count(const Extent3& e) { return e[0] * e[1] * e[2]; }
/// Row-major flat index, last axis fastest.
inline int64_t flat_index(const Extent3& e, int64_t i, int64_t j, int64_t k) { return (i * e[1] + j) * e[2] + k; }

struct LabelVolume {
  Extent3 shape{0, 0, 0};
  std::vector<uint8_t> labels;
  Spacing3 spacing_mm{1.0, 1.0, 1.0};

  /// Throws DataError when sizes disagree, spacing is not positive or a
  /// value is >= num_classes.
  void validate(int num_classes = kNumClasses) const;
};

/// One timepoint: intensities, labels and geometry.
struct VolumeSample {
  Extent3 shape{0, 0, 0};
  std::vector<float> intensity;
  std::vector<uint8_t> labels;
  Spacing3 spacing_mm{1.0, 1.0, 1.0};
  int64_t patient_id = 0;
  int64_t timepoint = 1;  // 1-based

  LabelVolume label_volume() const { return {shape, labels, spacing_mm}; }
  void validate() const;
};

/// VOL1: 4-byte magic, u64 little-endian header length, JSON header
/// {shape, spacing_mm, patient_id, timepoint, dtype_intensity, dtype_labels},
/// f32 intensities, u8 labels.
void save_volume(const VolumeSample& sample, const std::string& path);
VolumeSample load_volume(const std::string& path);

enum class Split { train, val, test };
std::string to_string(Split split);
Split split_from_string(const std::string& text);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int64_t patient_id = 0;
  int64_t timepoint = 1;
  Split split = Split::train;
};

struct Manifest {
  std::string directory;  // directory the relative paths resolve against
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> select(Split split) const;
  std::string resolve(const ManifestEntry& entry) const;
  /// Patients in `split`, ascending.
  std::vector<int64_t> patients(Split split) const;
};

void save_manifest(const Manifest& manifest, const std::string& path);
Manifest load_manifest(const std::string& path);

/// Hex digest of the sorted (patient, split) assignment; equal splits give
/// equal hashes.
std::string split_hash(const Manifest& manifest);

/// 64-bit FNV-1a over raw bytes, as 16 hex digits.
std::string fnv1a_hex(const void* data, size_t size);

}  // namespace trunet
