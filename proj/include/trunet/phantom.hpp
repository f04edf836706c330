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

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "trunet/volume.hpp"

namespace trunet {

/// Synthetic heart-like dataset: LV and LA ellipsoids, an LAA lobe on the
/// LA, a curved AA tube leaving the LV, and 2 to 4 PV tubes entering the LA,
/// deformed periodically over the cardiac cycle.
struct PhantomSpec {
  int64_t extent = 48;
  int64_t num_patients = 12;
  int64_t timepoints = 20;
  uint64_t seed = 0;
  double contrast_level = 1.0;
  std::vector<double> contrast_levels;  // per-patient override when non-empty
  double noise_sd = 15.0;
  Spacing3 spacing_mm{1.0, 1.0, 1.0};
  // The last `short_patients` patients get `short_timepoints` timepoints
  // (default timepoints / 2) and are always assigned to the test split.
  int64_t short_patients = 0;
  int64_t short_timepoints = 0;
  int64_t train_patients = 8;
  int64_t val_patients = 2;  // the rest go to test

  void validate() const;
  double contrast_for(int64_t patient_id) const;
  int64_t timepoints_for(int64_t patient_id) const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

/// Cycle position in [-1, 1]: 1 at t = 1 (end diastole), -1 at
/// t = timepoints/2 + 1; periodic with period `timepoints`.
double cycle_phase(int64_t timepoint, int64_t timepoints);

/// One timepoint of one patient (patient ids are 1-based).
VolumeSample generate_volume(const PhantomSpec& spec, int64_t patient_id, int64_t timepoint);

/// All patients and timepoints in (patient, timepoint) order.
std::vector<VolumeSample> generate_phantom(const PhantomSpec& spec);

/// Patient-level split, index i for patient i + 1. Short patients go to
/// test; the others are shuffled with the spec seed and dealt out as
/// train_patients / val_patients / rest.
std::vector<Split> assign_splits(const PhantomSpec& spec);

/// Writes every volume as VOL1 plus manifest.json into `directory`.
Manifest write_dataset(const PhantomSpec& spec, const std::string& directory);

}  // namespace trunet
