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

#include "trunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "trunet/error.hpp"

namespace trunet {

namespace {

void require_same(const LabelVolume& a, const LabelVolume& b) {
  if (a.shape != b.shape) throw UsageError("label volumes differ in shape");
  if (a.labels.size() != b.labels.size()) throw UsageError("label volumes differ in size");
}

void require_mask(const Mask& m, const Extent3& shape) {
  if (static_cast<int64_t>(m.size()) != voxel_count(shape)) throw UsageError("mask size does not match its shape");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas w·(q − p)² + f(p) along one line.
void edt_line(const double* f, double* d, int64_t n, double w, std::vector<int64_t>& v, std::vector<double>& z) {
  v.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n) + 1);
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + w * static_cast<double>(q) * static_cast<double>(q);
    while (k >= 0) {
      const int64_t p = v[k];
      const double fp = f[p] + w * static_cast<double>(p) * static_cast<double>(p);
      const double s = (fq - fp) / (2.0 * w * static_cast<double>(q - p));
      if (s <= z[k]) {
        --k;
      } else {
        z[k + 1] = s;
        break;
      }
    }
    if (k < 0) z[0] = -kInf;
    ++k;
    v[k] = q;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    for (int64_t q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double diff = static_cast<double>(q - v[j]);
    d[q] = w * diff * diff + f[v[j]];
  }
}

std::vector<double> directed_distances(const Mask& from_surface, const std::vector<double>& dt) {
  std::vector<double> out;
  for (size_t i = 0; i < from_surface.size(); ++i) {
    if (from_surface[i]) out.push_back(std::sqrt(dt[i]));
  }
  return out;
}

double nearest_rank_95(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  const auto rank = static_cast<size_t>(std::max(1.0, std::ceil(0.95 * n)));
  return values[rank - 1];
}

}  // namespace

Mask binary_mask(const LabelVolume& volume, int class_id) {
  Mask m(volume.labels.size());
  for (size_t i = 0; i < m.size(); ++i) m[i] = volume.labels[i] == class_id;
  return m;
}

Mask foreground_mask(const LabelVolume& volume) {
  Mask m(volume.labels.size());
  for (size_t i = 0; i < m.size(); ++i) m[i] = volume.labels[i] != 0;
  return m;
}

double dice_masks(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw UsageError("dice: masks differ in size");
  int64_t inter = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double dice_score(const LabelVolume& pred, const LabelVolume& truth, int class_id) {
  require_same(pred, truth);
  return dice_masks(binary_mask(pred, class_id), binary_mask(truth, class_id));
}

Mask surface(const Mask& mask, const Extent3& shape) {
  require_mask(mask, shape);
  Mask out(mask.size(), 0);
  const int64_t n0 = shape[0], n1 = shape[1], n2 = shape[2];
  for (int64_t i = 0; i < n0; ++i)
    for (int64_t j = 0; j < n1; ++j)
      for (int64_t k = 0; k < n2; ++k) {
        const int64_t idx = flat_index(shape, i, j, k);
        if (!mask[idx]) continue;
        const bool edge = i == 0 || j == 0 || k == 0 || i == n0 - 1 || j == n1 - 1 || k == n2 - 1;
        if (edge || !mask[idx - n1 * n2] || !mask[idx + n1 * n2] || !mask[idx - n2] || !mask[idx + n2] ||
            !mask[idx - 1] || !mask[idx + 1]) {
          out[idx] = 1;
        }
      }
  return out;
}

std::vector<double> squared_distance_transform(const Mask& sites, const Extent3& shape, const Spacing3& spacing) {
  require_mask(sites, shape);
  std::vector<double> g(sites.size());
  for (size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : kInf;
  const int64_t maxn = std::max({shape[0], shape[1], shape[2]});
  std::vector<double> f(static_cast<size_t>(maxn)), d(static_cast<size_t>(maxn));
  std::vector<int64_t> v;
  std::vector<double> z;
  const int64_t strides[3] = {shape[1] * shape[2], shape[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t n = shape[axis], stride = strides[axis];
    const double w = spacing[axis] * spacing[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int64_t x = 0; x < shape[a1]; ++x) {
      for (int64_t y = 0; y < shape[a2]; ++y) {
        const int64_t base = x * strides[a1] + y * strides[a2];
        for (int64_t q = 0; q < n; ++q) f[q] = g[base + q * stride];
        edt_line(f.data(), d.data(), n, w, v, z);
        for (int64_t q = 0; q < n; ++q) g[base + q * stride] = d[q];
      }
    }
  }
  return g;
}

double volume_diagonal_mm(const Extent3& shape, const Spacing3& spacing) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double len = static_cast<double>(shape[a] - 1) * spacing[a];
    s += len * len;
  }
  return std::sqrt(s);
}

double hd95_masks(const Mask& a, const Mask& b, const Extent3& shape, const Spacing3& spacing) {
  require_mask(a, shape);
  require_mask(b, shape);
  const bool ea = std::none_of(a.begin(), a.end(), [](uint8_t v) { return v != 0; });
  const bool eb = std::none_of(b.begin(), b.end(), [](uint8_t v) { return v != 0; });
  if (ea && eb) return 0.0;
  if (ea || eb) return volume_diagonal_mm(shape, spacing);
  const Mask sa = surface(a, shape), sb = surface(b, shape);
  const double ab = nearest_rank_95(directed_distances(sa, squared_distance_transform(sb, shape, spacing)));
  const double ba = nearest_rank_95(directed_distances(sb, squared_distance_transform(sa, shape, spacing)));
  return std::max(ab, ba);
}

double hd95(const LabelVolume& pred, const LabelVolume& truth, int class_id) {
  require_same(pred, truth);
  if (pred.spacing_mm != truth.spacing_mm) throw UsageError("hd95: label volumes differ in spacing");
  return hd95_masks(binary_mask(pred, class_id), binary_mask(truth, class_id), pred.shape, pred.spacing_mm);
}

Components connected_components(const Mask& mask, const Extent3& shape, int connectivity) {
  require_mask(mask, shape);
  if (connectivity != 6 && connectivity != 26) throw ConfigError("connectivity must be 6 or 26");
  std::vector<std::array<int, 3>> offsets;
  for (int di = -1; di <= 1; ++di)
    for (int dj = -1; dj <= 1; ++dj)
      for (int dk = -1; dk <= 1; ++dk) {
        const int manhattan = std::abs(di) + std::abs(dj) + std::abs(dk);
        if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
        offsets.push_back({di, dj, dk});
      }
  // Discovery in scan order, so component c starts at a smaller index than c + 1.
  std::vector<int32_t> raw(mask.size(), 0);
  std::vector<int64_t> sizes, firsts, stack;
  for (int64_t start = 0; start < static_cast<int64_t>(mask.size()); ++start) {
    if (!mask[start] || raw[start]) continue;
    const auto id = static_cast<int32_t>(sizes.size() + 1);
    int64_t count = 0;
    raw[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const int64_t idx = stack.back();
      stack.pop_back();
      ++count;
      const int64_t i = idx / (shape[1] * shape[2]), j = (idx / shape[2]) % shape[1], k = idx % shape[2];
      for (const auto& o : offsets) {
        const int64_t a = i + o[0], b = j + o[1], c = k + o[2];
        if (a < 0 || b < 0 || c < 0 || a >= shape[0] || b >= shape[1] || c >= shape[2]) continue;
        const int64_t nidx = flat_index(shape, a, b, c);
        if (mask[nidx] && !raw[nidx]) {
          raw[nidx] = id;
          stack.push_back(nidx);
        }
      }
    }
    sizes.push_back(count);
    firsts.push_back(start);
  }
  std::vector<size_t> order(sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) { return sizes[x] > sizes[y]; });
  std::vector<int32_t> rank(sizes.size() + 1, 0);
  Components out;
  for (size_t r = 0; r < order.size(); ++r) {
    rank[order[r] + 1] = static_cast<int32_t>(r + 1);
    out.sizes.push_back(sizes[order[r]]);
    out.first_voxel.push_back(firsts[order[r]]);
  }
  out.labels.resize(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out.labels[i] = rank[static_cast<size_t>(raw[i])];
  return out;
}

LabelVolume retain_clusters(const LabelVolume& pred, int connectivity) {
  LabelVolume out = pred;
  for (int roi = lv; roi <= pv; ++roi) {
    const auto comps = connected_components(binary_mask(pred, roi), pred.shape, connectivity);
    if (comps.count() <= 1) continue;
    // Components are sorted by size, so a prefix is kept.
    size_t keep = 1;
    if (roi == pv) {
      const int64_t threshold = (comps.sizes[0] + 1) / 2;  // ceil(largest / 2)
      while (keep < comps.count() && comps.sizes[keep] >= threshold) ++keep;
    }
    for (size_t i = 0; i < out.labels.size(); ++i) {
      if (comps.labels[i] > static_cast<int32_t>(keep)) out.labels[i] = background;
    }
  }
  return out;
}

bool Box::contains(const Box& other) const {
  for (int a = 0; a < 3; ++a) {
    if (other.lo[a] < lo[a] || other.hi[a] > hi[a]) return false;
  }
  return true;
}

nlohmann::json to_json_value(const Box& box) { return {{"lo", box.lo}, {"hi", box.hi}}; }

Box box_from_json(const nlohmann::json& j) {
  Box b;
  b.lo = j.at("lo").get<Extent3>();
  b.hi = j.at("hi").get<Extent3>();
  return b;
}

bool tight_box(const Mask& mask, const Extent3& shape, Box& out) {
  require_mask(mask, shape);
  bool any = false;
  Box b{{shape[0], shape[1], shape[2]}, {-1, -1, -1}};
  for (int64_t i = 0; i < shape[0]; ++i)
    for (int64_t j = 0; j < shape[1]; ++j)
      for (int64_t k = 0; k < shape[2]; ++k) {
        if (!mask[flat_index(shape, i, j, k)]) continue;
        any = true;
        const int64_t c[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], c[a]);
          b.hi[a] = std::max(b.hi[a], c[a]);
        }
      }
  if (any) out = b;
  return any;
}

Box bounding_box(const std::vector<Mask>& masks, int64_t margin, const Extent3& shape) {
  if (margin < 0) throw ConfigError("bounding box margin must be non-negative");
  bool any = false;
  Box u{{shape[0], shape[1], shape[2]}, {-1, -1, -1}};
  for (const auto& m : masks) {
    Box b;
    if (!tight_box(m, shape, b)) continue;
    any = true;
    for (int a = 0; a < 3; ++a) {
      u.lo[a] = std::min(u.lo[a], b.lo[a]);
      u.hi[a] = std::max(u.hi[a], b.hi[a]);
    }
  }
  if (!any) throw DataError("no region of interest found: every mask is empty");
  for (int a = 0; a < 3; ++a) {
    u.lo[a] = std::max<int64_t>(0, u.lo[a] - margin);
    u.hi[a] = std::min<int64_t>(shape[a] - 1, u.hi[a] + margin);
  }
  return u;
}

double sample_sd(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

MetricsReport evaluate(const std::vector<LabelVolume>& preds, const std::vector<LabelVolume>& truths,
                       const std::vector<std::string>& volume_ids, bool apply_cluster_removal) {
  if (preds.size() != truths.size() || preds.size() != volume_ids.size()) {
    throw UsageError("evaluate: predictions, truths and ids must align");
  }
  if (preds.empty()) throw UsageError("evaluate: nothing to evaluate");
  MetricsReport report;
  report.cluster_removal = apply_cluster_removal;
  for (size_t v = 0; v < preds.size(); ++v) {
    const LabelVolume pred = apply_cluster_removal ? retain_clusters(preds[v]) : preds[v];
    VolumeMetrics row;
    row.volume_id = volume_ids[v];
    for (int r = 0; r < kNumRois; ++r) {
      row.dss[r] = dice_score(pred, truths[v], r + 1);
      row.hd95[r] = hd95(pred, truths[v], r + 1);
    }
    report.rows.push_back(row);
  }
  for (int r = 0; r < kNumRois; ++r) {
    std::vector<double> d, h;
    for (const auto& row : report.rows) {
      d.push_back(row.dss[r]);
      h.push_back(row.hd95[r]);
    }
    report.dss_mean[r] = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    report.hd95_mean[r] = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
    report.dss_sd[r] = sample_sd(d);
    report.hd95_sd[r] = sample_sd(h);
  }
  report.macro_dss = std::accumulate(report.dss_mean.begin(), report.dss_mean.end(), 0.0) / kNumRois;
  report.macro_hd95 = std::accumulate(report.hd95_mean.begin(), report.hd95_mean.end(), 0.0) / kNumRois;
  return report;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "volume_id,roi,dss,hd95_mm\n";
  for (const auto& row : rows) {
    for (int r = 0; r < kNumRois; ++r) out << row.volume_id << ',' << roi_name(r + 1) << ',' << row.dss[r] << ',' << row.hd95[r] << '\n';
  }
  out << "\nroi,dss_mean,dss_sd,hd95_mean_mm,hd95_sd_mm\n";
  for (int r = 0; r < kNumRois; ++r) {
    out << roi_name(r + 1) << ',' << dss_mean[r] << ',' << dss_sd[r] << ',' << hd95_mean[r] << ',' << hd95_sd[r] << '\n';
  }
  out << "macro," << macro_dss << ",," << macro_hd95 << ",\n";
  return out.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_roi = nlohmann::json::object();
  for (int r = 0; r < kNumRois; ++r) {
    per_roi[roi_name(r + 1)] = {{"dss_mean", dss_mean[r]}, {"dss_sd", dss_sd[r]}, {"hd95_mean_mm", hd95_mean[r]},
                                {"hd95_sd_mm", hd95_sd[r]}};
  }
  nlohmann::json vols = nlohmann::json::array();
  for (const auto& row : rows) vols.push_back({{"volume_id", row.volume_id}, {"dss", row.dss}, {"hd95_mm", row.hd95}});
  return {{"cluster_removal", cluster_removal},
          {"macro_dss", macro_dss},
          {"macro_hd95_mm", macro_hd95},
          {"rois", per_roi},
          {"volumes", vols}};
}

}  // namespace trunet
