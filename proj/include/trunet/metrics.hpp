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
#include <string>
#include <vector>

#include "json.hpp"
#include "trunet/volume.hpp"

namespace trunet {

using Mask = std::vector<uint8_t>;  // nonzero = inside

Mask binary_mask(const LabelVolume& volume, int class_id);
/// Nonzero labels of `volume` as one mask (the localizer's target).
Mask foreground_mask(const LabelVolume& volume);

/// 2|A∩B| / (|A| + |B|); 1 when both are empty, 0 when exactly one is.
double dice_masks(const Mask& a, const Mask& b);
double dice_score(const LabelVolume& pred, const LabelVolume& truth, int class_id);

/// Mask voxels with at least one 6-neighbour outside the mask; voxels on the
/// volume border count as surface.
Mask surface(const Mask& mask, const Extent3& shape);

/// Squared Euclidean distance (mm²) from every voxel to the nearest nonzero
/// voxel of `sites`; +inf everywhere when there are none. Exact, separable.
std::vector<double> squared_distance_transform(const Mask& sites, const Extent3& shape, const Spacing3& spacing);

/// Symmetric 95th-percentile surface distance in mm (nearest-rank). 0 when
/// both masks are empty, the volume diagonal when exactly one is.
double hd95_masks(const Mask& a, const Mask& b, const Extent3& shape, const Spacing3& spacing);
double hd95(const LabelVolume& pred, const LabelVolume& truth, int class_id);
double volume_diagonal_mm(const Extent3& shape, const Spacing3& spacing);

struct Components {
  std::vector<int32_t> labels;  // 0 outside, k for the k-th component (1-based, sorted order)
  std::vector<int64_t> sizes;   // decreasing; ties by smallest first voxel index
  std::vector<int64_t> first_voxel;
  size_t count() const { return sizes.size(); }
};

/// Flood-fill partition with 6- or 26-connectivity.
Components connected_components(const Mask& mask, const Extent3& shape, int connectivity = 26);

/// LV, LA, LAA and AA keep their largest component; PV keeps every
/// component of at least ceil(largest / 2) voxels. Removed voxels become
/// background.
LabelVolume retain_clusters(const LabelVolume& pred, int connectivity = 26);

struct Box {
  Extent3 lo{0, 0, 0}, hi{0, 0, 0};  // inclusive

  bool contains(const Box& other) const;
  Extent3 size() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
  bool operator==(const Box&) const = default;
};

nlohmann::json to_json_value(const Box& box);
Box box_from_json(const nlohmann::json& j);

/// Tight box around the nonzero voxels of one mask; false when empty.
bool tight_box(const Mask& mask, const Extent3& shape, Box& out);

/// Union of the masks' tight boxes expanded by `margin` and clamped to the
/// volume. Throws DataError when every mask is empty.
Box bounding_box(const std::vector<Mask>& masks, int64_t margin, const Extent3& shape);

struct VolumeMetrics {
  std::string volume_id;
  std::array<double, kNumRois> dss{};
  std::array<double, kNumRois> hd95{};
};

struct MetricsReport {
  std::vector<VolumeMetrics> rows;
  std::array<double, kNumRois> dss_mean{}, dss_sd{}, hd95_mean{}, hd95_sd{};
  double macro_dss = 0.0;
  double macro_hd95 = 0.0;
  bool cluster_removal = false;

  /// Per-volume rows (volume_id, roi, dss, hd95_mm), then a summary block
  /// with one line per ROI and the macro average.
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Sample standard deviation (n − 1); 0 for fewer than two values.
double sample_sd(const std::vector<double>& values);

MetricsReport evaluate(const std::vector<LabelVolume>& preds, const std::vector<LabelVolume>& truths,
                       const std::vector<std::string>& volume_ids, bool apply_cluster_removal);

}  // namespace trunet
