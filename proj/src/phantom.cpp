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

#include "trunet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "trunet/error.hpp"

namespace trunet {

void PhantomSpec::validate() const {
  std::vector<std::string> problems;
  if (extent < 32) problems.push_back("extent must be at least 32");
  if (num_patients < 1) problems.push_back("num_patients must be positive");
  if (timepoints < 1) problems.push_back("timepoints must be at least 1");
  if (!(contrast_level > 0.0)) problems.push_back("contrast_level must be positive");
  if (!contrast_levels.empty() && static_cast<int64_t>(contrast_levels.size()) != num_patients) {
    problems.push_back("contrast_levels needs one entry per patient");
  }
  for (double c : contrast_levels) {
    if (!(c > 0.0)) problems.push_back("contrast_levels entries must be positive");
  }
  if (noise_sd < 0.0) problems.push_back("noise_sd must be non-negative");
  for (double s : spacing_mm) {
    if (!(s > 0.0)) problems.push_back("spacing_mm entries must be positive");
  }
  if (short_patients < 0 || short_patients > num_patients) problems.push_back("short_patients out of range");
  if (short_timepoints < 0 || (short_timepoints > 0 && short_timepoints >= timepoints)) {
    problems.push_back("short_timepoints must be below timepoints");
  }
  if (train_patients < 0 || val_patients < 0 || train_patients + val_patients > num_patients - short_patients) {
    problems.push_back("train_patients + val_patients exceeds the patients available for those splits");
  }
  if (problems.empty()) return;
  std::string msg = "invalid phantom spec: ";
  for (size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
  throw ConfigError(msg);
}

double PhantomSpec::contrast_for(int64_t patient_id) const {
  if (!contrast_levels.empty()) return contrast_levels.at(static_cast<size_t>(patient_id - 1));
  return contrast_level;
}

int64_t PhantomSpec::timepoints_for(int64_t patient_id) const {
  if (patient_id > num_patients - short_patients) {
    return short_timepoints > 0 ? short_timepoints : std::max<int64_t>(1, timepoints / 2);
  }
  return timepoints;
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"extent", s.extent},
                     {"num_patients", s.num_patients},
                     {"timepoints", s.timepoints},
                     {"seed", s.seed},
                     {"contrast_level", s.contrast_level},
                     {"contrast_levels", s.contrast_levels},
                     {"noise_sd", s.noise_sd},
                     {"spacing_mm", s.spacing_mm},
                     {"short_patients", s.short_patients},
                     {"short_timepoints", s.short_timepoints},
                     {"train_patients", s.train_patients},
                     {"val_patients", s.val_patients}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  if (!j.is_object()) throw ConfigError("phantom spec must be a JSON object");
  static const char* known[] = {"extent",         "num_patients",     "timepoints",     "seed",
                                "contrast_level", "contrast_levels",  "noise_sd",       "spacing_mm",
                                "short_patients", "short_timepoints", "train_patients", "val_patients"};
  for (const auto& item : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return item.key() == k; }) ==
        std::end(known)) {
      throw ConfigError("unknown key '" + item.key() + "' in phantom spec");
    }
  }
  try {
    s.extent = j.value("extent", s.extent);
    s.num_patients = j.value("num_patients", s.num_patients);
    s.timepoints = j.value("timepoints", s.timepoints);
    s.seed = j.value("seed", s.seed);
    s.contrast_level = j.value("contrast_level", s.contrast_level);
    s.contrast_levels = j.value("contrast_levels", s.contrast_levels);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.spacing_mm = j.value("spacing_mm", s.spacing_mm);
    s.short_patients = j.value("short_patients", s.short_patients);
    s.short_timepoints = j.value("short_timepoints", s.short_timepoints);
    s.train_patients = j.value("train_patients", s.train_patients);
    s.val_patients = j.value("val_patients", s.val_patients);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad phantom spec value: ") + e.what());
  }
}

double cycle_phase(int64_t timepoint, int64_t timepoints) {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(timepoint - 1) / static_cast<double>(timepoints);
  return std::cos(angle);
}

namespace {

using Vec3 = std::array<double, 3>;

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

struct Ellipsoid {
  Vec3 center, radii;
  bool contains(const Vec3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / radii[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

struct Tube {
  std::vector<Vec3> points;
  double radius;
  bool contains(const Vec3& p) const {
    for (size_t i = 0; i + 1 < points.size(); ++i) {
      const Vec3 ab = points[i + 1] - points[i];
      const double t = std::clamp(dot(p - points[i], ab) / dot(ab, ab), 0.0, 1.0);
      const Vec3 d = p - (points[i] + t * ab);
      if (dot(d, d) <= radius * radius) return true;
    }
    return false;
  }
};

uint64_t mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::mt19937_64 stream(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  return std::mt19937_64(mix(mix(mix(seed) ^ a) ^ (b << 20)) ^ (c << 40));
}

// Anatomy of one patient at one cycle phase, in normalized [-1, 1] coords.
struct Anatomy {
  Ellipsoid lv, la, laa;
  Tube aa, distractor;
  std::vector<Tube> pv;
};

Anatomy build_anatomy(const PhantomSpec& spec, int64_t patient_id, double phase) {
  auto rng = stream(spec.seed, static_cast<uint64_t>(patient_id), 0, 1);
  std::uniform_real_distribution<double> shift(-0.05, 0.05), scale(0.93, 1.07);
  const Vec3 offset{shift(rng), shift(rng), shift(rng)};
  const double size = scale(rng);
  const int pv_count = 2 + static_cast<int>(rng() % 3);

  Anatomy a;
  // LV is largest at end diastole; the atrium fills while the ventricle empties.
  const double lv_scale = size * (1.0 + 0.10 * phase);
  const double la_scale = size * (1.0 - 0.08 * phase);
  a.lv = {Vec3{0.25, 0.10, 0.05} + offset, lv_scale * Vec3{0.40, 0.27, 0.27}};
  a.la = {Vec3{-0.38, 0.05, -0.05} + offset, la_scale * Vec3{0.20, 0.24, 0.22}};
  a.laa = {a.la.center + la_scale * Vec3{0.02, 0.22, 0.15}, size * Vec3{0.15, 0.15, 0.15}};
  a.aa = {{Vec3{0.05, -0.10, 0.0} + offset, Vec3{0.0, -0.42, 0.05} + offset, Vec3{-0.20, -0.64, 0.14} + offset,
           Vec3{-0.48, -0.62, 0.24} + offset},
          0.11 * size};
  const Vec3 dirs[4] = {{-0.62, -0.55, -0.56}, {-0.62, -0.45, 0.64}, {-0.70, 0.50, -0.51}, {-0.95, 0.05, 0.30}};
  for (int k = 0; k < pv_count; ++k) {
    const Vec3 d = (1.0 / std::sqrt(dot(dirs[k], dirs[k]))) * dirs[k];
    a.pv.push_back({{a.la.center + 0.12 * d, a.la.center + (0.45 * la_scale) * d}, 0.09 * size});
  }
  // A bright background structure so intensity alone does not separate the heart.
  a.distractor = {{Vec3{0.40, 0.66, -0.50}, Vec3{-0.40, 0.66, -0.50}}, 0.09};
  return a;
}

}  // namespace

VolumeSample generate_volume(const PhantomSpec& spec, int64_t patient_id, int64_t timepoint) {
  spec.validate();
  if (patient_id < 1 || patient_id > spec.num_patients) throw ConfigError("patient id out of range");
  const int64_t tps = spec.timepoints_for(patient_id);
  if (timepoint < 1 || timepoint > tps) throw ConfigError("timepoint out of range");

  const Anatomy anatomy = build_anatomy(spec, patient_id, cycle_phase(timepoint, spec.timepoints));
  const int64_t n = spec.extent;
  VolumeSample s;
  s.shape = {n, n, n};
  s.spacing_mm = spec.spacing_mm;
  s.patient_id = patient_id;
  s.timepoint = timepoint;
  s.labels.assign(static_cast<size_t>(n * n * n), 0);
  s.intensity.assign(static_cast<size_t>(n * n * n), 0.0f);

  // Anatomy coordinates are stretched by 1.3 so the heart fills most of the field.
  const double centre = (static_cast<double>(n) - 1.0) / 2.0, half = 1.3 * static_cast<double>(n) / 2.0;
  const double contrast = spec.contrast_for(patient_id);
  // Base levels per label (background, LV, LA, LAA, AA, PV) and the distractor.
  const double level[kNumClasses] = {-80.0, 220.0, 170.0, 125.0, 265.0, 80.0};
  const double distractor_level = 240.0;
  auto noise_rng = stream(spec.seed, static_cast<uint64_t>(patient_id), static_cast<uint64_t>(timepoint), 2);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      for (int64_t k = 0; k < n; ++k) {
        const Vec3 p{(static_cast<double>(i) - centre) / half, (static_cast<double>(j) - centre) / half,
                     (static_cast<double>(k) - centre) / half};
        // Painting order doubles as priority: later primitives win.
        uint8_t label = background;
        for (const auto& tube : anatomy.pv) {
          if (tube.contains(p)) label = pv;
        }
        if (anatomy.la.contains(p)) label = la;
        if (anatomy.laa.contains(p)) label = laa;
        if (anatomy.aa.contains(p)) label = aa;
        if (anatomy.lv.contains(p)) label = lv;
        double value = level[label];
        if (label == background && anatomy.distractor.contains(p)) value = distractor_level;
        value = value * contrast + 25.0 * (p[0] + 0.5 * p[1]) + spec.noise_sd * noise(noise_rng);
        const auto idx = static_cast<size_t>(flat_index(s.shape, i, j, k));
        s.labels[idx] = label;
        s.intensity[idx] = static_cast<float>(value);
      }
    }
  }
  int64_t counts[kNumClasses] = {};
  for (uint8_t v : s.labels) ++counts[v];
  for (int c = 1; c < kNumClasses; ++c) {
    if (counts[c] < 8) {
      throw DataError(std::string("phantom primitive ") + roi_name(c) + " cannot be placed at extent " +
                      std::to_string(n) + " (only " + std::to_string(counts[c]) + " voxels)");
    }
  }
  return s;
}

std::vector<VolumeSample> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::vector<VolumeSample> out;
  for (int64_t p = 1; p <= spec.num_patients; ++p) {
    for (int64_t t = 1; t <= spec.timepoints_for(p); ++t) out.push_back(generate_volume(spec, p, t));
  }
  return out;
}

std::vector<Split> assign_splits(const PhantomSpec& spec) {
  spec.validate();
  std::vector<Split> splits(static_cast<size_t>(spec.num_patients), Split::test);
  std::vector<int64_t> regular;
  for (int64_t p = 1; p <= spec.num_patients; ++p) {
    if (spec.timepoints_for(p) >= spec.timepoints) regular.push_back(p);
  }
  auto rng = stream(spec.seed, 0, 0, 3);
  // Fisher-Yates with explicit draws keeps the order library-independent.
  for (size_t i = regular.size(); i > 1; --i) std::swap(regular[i - 1], regular[rng() % i]);
  for (size_t i = 0; i < regular.size(); ++i) {
    Split s = Split::test;
    if (static_cast<int64_t>(i) < spec.train_patients) s = Split::train;
    else if (static_cast<int64_t>(i) < spec.train_patients + spec.val_patients) s = Split::val;
    splits[static_cast<size_t>(regular[i] - 1)] = s;
  }
  return splits;
}

Manifest write_dataset(const PhantomSpec& spec, const std::string& directory) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory + ": " + ec.message());
  const auto splits = assign_splits(spec);
  Manifest m;
  m.directory = directory;
  for (int64_t p = 1; p <= spec.num_patients; ++p) {
    for (int64_t t = 1; t <= spec.timepoints_for(p); ++t) {
      char name[64];
      std::snprintf(name, sizeof(name), "patient%03lld_t%02lld.vol", static_cast<long long>(p),
                    static_cast<long long>(t));
      save_volume(generate_volume(spec, p, t), (fs::path(directory) / name).string());
      m.entries.push_back({name, p, t, splits[static_cast<size_t>(p - 1)]});
    }
  }
  save_manifest(m, (fs::path(directory) / "manifest.json").string());
  return m;
}

}  // namespace trunet
