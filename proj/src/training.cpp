#include "trunet/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "trunet/error.hpp"
#include "trunet/ops.hpp"

namespace trunet {

std::string to_string(InputMode mode) {
  switch (mode) {
    case InputMode::downsample:
      return "downsample";
    case InputMode::patches:
      return "patches";
    case InputMode::crop_then_downsample:
      return "crop_then_downsample";
  }
  return "?";
}

InputMode input_mode_from_string(const std::string& text) {
  if (text == "downsample") return InputMode::downsample;
  if (text == "patches") return InputMode::patches;
  if (text == "crop_then_downsample") return InputMode::crop_then_downsample;
  throw ConfigError("unknown input mode '" + text + "' (expected downsample, patches or crop_then_downsample)");
}

std::string to_string(CeVoxels scope) { return scope == CeVoxels::all ? "all" : "foreground"; }

CeVoxels ce_voxels_from_string(const std::string& text) {
  if (text == "all") return CeVoxels::all;
  if (text == "foreground") return CeVoxels::foreground;
  throw ConfigError("unknown ce_voxels '" + text + "' (expected all or foreground)");
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  auto probability = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) problems.push_back(std::string(name) + " must lie in [0, 1]");
  };
  probability(rotate_prob, "rotate_prob");
  probability(flip_prob, "flip_prob");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) problems.push_back("base_lr must be positive");
  if (!(poly_power >= 0.0)) problems.push_back("poly_power must be non-negative");
  if (epochs < 0) problems.push_back("epochs must be non-negative");
  if (!(max_wall_seconds >= 0.0)) problems.push_back("max_wall_seconds must be non-negative");
  if (batch_size < 1) problems.push_back("batch_size must be at least 1");
  if (target_extent < 16 || target_extent % 16 != 0) problems.push_back("target_extent must be a positive multiple of 16");
  if (!(rotate_max_deg >= 0.0 && rotate_max_deg <= 180.0)) problems.push_back("rotate_max_deg must lie in [0, 180]");
  if (val_every < 1) problems.push_back("val_every must be at least 1");
  if (problems.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"base_lr", c.base_lr},
                     {"poly_power", c.poly_power},
                     {"epochs", c.epochs},
                     {"max_wall_seconds", c.max_wall_seconds},
                     {"batch_size", c.batch_size},
                     {"input_mode", to_string(c.input_mode)},
                     {"target_extent", c.target_extent},
                     {"rotate_max_deg", c.rotate_max_deg},
                     {"rotate_prob", c.rotate_prob},
                     {"flip_prob", c.flip_prob},
                     {"seed", c.seed},
                     {"exclude_background", c.exclude_background},
                     {"ce_voxels", to_string(c.ce_voxels)},
                     {"val_every", c.val_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known = {
      "base_lr",   "poly_power",  "epochs",    "max_wall_seconds", "batch_size",         "input_mode", "target_extent",
      "rotate_max_deg", "rotate_prob", "flip_prob", "seed",         "exclude_background", "ce_voxels", "val_every"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("unknown key '" + item.key() + "' in train config");
    }
  }
  try {
    c.base_lr = j.value("base_lr", c.base_lr);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.epochs = j.value("epochs", c.epochs);
    c.max_wall_seconds = j.value("max_wall_seconds", c.max_wall_seconds);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("input_mode")) c.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
    c.target_extent = j.value("target_extent", c.target_extent);
    c.rotate_max_deg = j.value("rotate_max_deg", c.rotate_max_deg);
    c.rotate_prob = j.value("rotate_prob", c.rotate_prob);
    c.flip_prob = j.value("flip_prob", c.flip_prob);
    c.seed = j.value("seed", c.seed);
    c.exclude_background = j.value("exclude_background", c.exclude_background);
    if (j.contains("ce_voxels")) c.ce_voxels = ce_voxels_from_string(j.at("ce_voxels").get<std::string>());
    c.val_every = j.value("val_every", c.val_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// loss

template <typename T>
BasicTensor<T> dice_ce_loss(const BasicTensor<T>& probabilities, std::span<const uint8_t> labels,
                            bool exclude_background, LossTerms* terms, CeVoxels ce_voxels) {
  const Shape& s = probabilities.shape();
  if (s.size() < 2) throw ConfigError("dice_ce_loss expects probabilities [N, C, ...]");
  const int64_t n_batch = s[0], classes = s[1];
  const int64_t voxels = probabilities.numel() / std::max<int64_t>(1, n_batch * classes);
  if (static_cast<int64_t>(labels.size()) != n_batch * voxels) {
    throw ConfigError("dice_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(n_batch * voxels) + " voxels");
  }
  for (uint8_t l : labels) {
    if (l >= classes) throw DataError("label " + std::to_string(l) + " out of range for " + std::to_string(classes) + " classes");
  }
  const int64_t first = exclude_background ? 1 : 0;
  const int64_t scored = classes - first;
  const int64_t ce_first = ce_voxels == CeVoxels::all ? 0 : first;
  if (scored < 1) throw ConfigError("dice_ce_loss needs at least one scored class");

  const auto p = probabilities.data();
  // Per (sample, class): intersection, prediction mass, label count.
  std::vector<double> inter(static_cast<size_t>(n_batch * classes), 0.0), mass(inter.size(), 0.0),
      count(inter.size(), 0.0);
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t c = first; c < classes; ++c) {
      const T* pc = p.data() + (n * classes + c) * voxels;
      const uint8_t* y = labels.data() + n * voxels;
      double i_sum = 0, p_sum = 0, y_sum = 0;
      for (int64_t v = 0; v < voxels; ++v) {
        p_sum += pc[v];
        if (y[v] == c) {
          i_sum += pc[v];
          y_sum += 1;
        }
      }
      const size_t k = static_cast<size_t>(n * classes + c);
      inter[k] = i_sum;
      mass[k] = p_sum;
      count[k] = y_sum;
    }
  }
  const double s_eps = kDiceSmoothing;
  double dice_mean = 0;
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t c = first; c < classes; ++c) {
      const size_t k = static_cast<size_t>(n * classes + c);
      dice_mean += (2 * inter[k] + s_eps) / (mass[k] + count[k] + s_eps);
    }
  dice_mean /= static_cast<double>(n_batch * scored);

  const double floor = 1e-12;
  double ce_sum = 0, ce_count = 0;
  for (int64_t n = 0; n < n_batch; ++n) {
    const uint8_t* y = labels.data() + n * voxels;
    for (int64_t v = 0; v < voxels; ++v) {
      if (y[v] < ce_first) continue;
      const double pt = p[static_cast<size_t>((n * classes + y[v]) * voxels + v)];
      ce_sum -= std::log(std::max(pt, floor));
      ce_count += 1;
    }
  }
  const double dice_loss = 1.0 - dice_mean;
  const double ce = ce_count > 0 ? ce_sum / ce_count : 0.0;
  if (terms) *terms = {dice_loss, ce};

  std::vector<uint8_t> y(labels.begin(), labels.end());
  return detail::make_result<T>(
      "dice_ce_loss", {}, {static_cast<T>(0.5 * (dice_loss + ce))}, {&probabilities},
      [pi = probabilities.impl(), y = std::move(y), inter = std::move(inter), mass = std::move(mass),
       count = std::move(count), n_batch, classes, voxels, first, ce_first, scored, ce_count, s_eps,
       floor](const detail::TensorImpl<T>& res) {
        const double g = 0.5 * static_cast<double>(res.grad[0]);
        auto& gp = pi->ensure_grad();
        const auto& pd = pi->data;
        const double dice_scale = -g / static_cast<double>(n_batch * scored);
        for (int64_t n = 0; n < n_batch; ++n) {
          const uint8_t* yn = y.data() + n * voxels;
          for (int64_t c = first; c < classes; ++c) {
            const size_t k = static_cast<size_t>(n * classes + c);
            const double den = mass[k] + count[k] + s_eps;
            const double num = 2 * inter[k] + s_eps;
            const double on = dice_scale * (2 * den - num) / (den * den);
            const double off = dice_scale * (-num) / (den * den);
            T* gc = gp.data() + (n * classes + c) * voxels;
            for (int64_t v = 0; v < voxels; ++v) gc[v] += static_cast<T>(yn[v] == c ? on : off);
          }
          if (ce_count > 0) {
            for (int64_t v = 0; v < voxels; ++v) {
              if (yn[v] < ce_first) continue;
              const size_t j = static_cast<size_t>((n * classes + yn[v]) * voxels + v);
              const double pt = pd[j];
              if (pt > floor) gp[j] += static_cast<T>(-g / (ce_count * pt));
            }
          }
        }
      });
}

template Tensor dice_ce_loss(const Tensor&, std::span<const uint8_t>, bool, LossTerms*, CeVoxels);
template TensorD dice_ce_loss(const TensorD&, std::span<const uint8_t>, bool, LossTerms*, CeVoxels);

// ---------------------------------------------------------------------------
// resampling

namespace {

struct AxisSamples {
  std::vector<int64_t> lo, hi;
  std::vector<double> w;  // weight of `hi`
};

// Half-voxel-centred source coordinates for each destination index.
AxisSamples axis_samples(int64_t from, int64_t to) {
  AxisSamples a;
  const double ratio = static_cast<double>(from) / static_cast<double>(to);
  for (int64_t d = 0; d < to; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(from - 1));
    const auto l = static_cast<int64_t>(std::floor(src));
    a.lo.push_back(l);
    a.hi.push_back(std::min(l + 1, from - 1));
    a.w.push_back(src - static_cast<double>(l));
  }
  return a;
}

std::vector<int64_t> nearest_samples(int64_t from, int64_t to) {
  std::vector<int64_t> idx;
  const double ratio = static_cast<double>(from) / static_cast<double>(to);
  for (int64_t d = 0; d < to; ++d) {
    idx.push_back(std::min(from - 1, static_cast<int64_t>(std::floor((static_cast<double>(d) + 0.5) * ratio))));
  }
  return idx;
}

void check_extents(size_t size, const Extent3& shape) {
  if (static_cast<int64_t>(size) != voxel_count(shape)) throw ConfigError("resize: buffer does not match its extent");
  for (int64_t e : shape)
    if (e < 1) throw ConfigError("resize: extents must be positive");
}

float min_value(const std::vector<float>& v) { return v.empty() ? 0.0f : *std::min_element(v.begin(), v.end()); }

}  // namespace

std::vector<float> resize_intensity(std::span<const float> values, const Extent3& from, const Extent3& to) {
  check_extents(values.size(), from);
  for (int64_t e : to)
    if (e < 1) throw ConfigError("resize: extents must be positive");
  if (from == to) return {values.begin(), values.end()};
  const auto ax = axis_samples(from[0], to[0]), ay = axis_samples(from[1], to[1]), az = axis_samples(from[2], to[2]);
  std::vector<float> out(static_cast<size_t>(voxel_count(to)));
  auto at = [&](int64_t i, int64_t j, int64_t k) { return static_cast<double>(values[flat_index(from, i, j, k)]); };
  for (int64_t i = 0; i < to[0]; ++i)
    for (int64_t j = 0; j < to[1]; ++j)
      for (int64_t k = 0; k < to[2]; ++k) {
        const double wx = ax.w[i], wy = ay.w[j], wz = az.w[k];
        const int64_t x0 = ax.lo[i], x1 = ax.hi[i], y0 = ay.lo[j], y1 = ay.hi[j], z0 = az.lo[k], z1 = az.hi[k];
        const double c00 = at(x0, y0, z0) * (1 - wz) + at(x0, y0, z1) * wz;
        const double c01 = at(x0, y1, z0) * (1 - wz) + at(x0, y1, z1) * wz;
        const double c10 = at(x1, y0, z0) * (1 - wz) + at(x1, y0, z1) * wz;
        const double c11 = at(x1, y1, z0) * (1 - wz) + at(x1, y1, z1) * wz;
        const double c0 = c00 * (1 - wy) + c01 * wy, c1 = c10 * (1 - wy) + c11 * wy;
        out[flat_index(to, i, j, k)] = static_cast<float>(c0 * (1 - wx) + c1 * wx);
      }
  return out;
}

std::vector<uint8_t> resize_labels(std::span<const uint8_t> labels, const Extent3& from, const Extent3& to) {
  check_extents(labels.size(), from);
  for (int64_t e : to)
    if (e < 1) throw ConfigError("resize: extents must be positive");
  if (from == to) return {labels.begin(), labels.end()};
  const auto ix = nearest_samples(from[0], to[0]), iy = nearest_samples(from[1], to[1]), iz = nearest_samples(from[2], to[2]);
  std::vector<uint8_t> out(static_cast<size_t>(voxel_count(to)));
  for (int64_t i = 0; i < to[0]; ++i)
    for (int64_t j = 0; j < to[1]; ++j)
      for (int64_t k = 0; k < to[2]; ++k) out[flat_index(to, i, j, k)] = labels[flat_index(from, ix[i], iy[j], iz[k])];
  return out;
}

VolumeSample crop(const VolumeSample& sample, const Extent3& lo, const Extent3& size) {
  for (int64_t e : size)
    if (e < 1) throw ConfigError("crop: size must be positive");
  VolumeSample out = sample;
  out.shape = size;
  const float fill = min_value(sample.intensity);
  out.intensity.assign(static_cast<size_t>(voxel_count(size)), fill);
  out.labels.assign(out.intensity.size(), background);
  for (int64_t i = 0; i < size[0]; ++i) {
    const int64_t si = lo[0] + i;
    if (si < 0 || si >= sample.shape[0]) continue;
    for (int64_t j = 0; j < size[1]; ++j) {
      const int64_t sj = lo[1] + j;
      if (sj < 0 || sj >= sample.shape[1]) continue;
      for (int64_t k = 0; k < size[2]; ++k) {
        const int64_t sk = lo[2] + k;
        if (sk < 0 || sk >= sample.shape[2]) continue;
        const auto src = flat_index(sample.shape, si, sj, sk), dst = flat_index(size, i, j, k);
        out.intensity[dst] = sample.intensity[src];
        out.labels[dst] = sample.labels[src];
      }
    }
  }
  return out;
}

VolumeSample flip(const VolumeSample& sample, int axis) {
  if (axis < 0 || axis > 2) throw ConfigError("flip axis must be 0, 1 or 2");
  VolumeSample out = sample;
  const auto& s = sample.shape;
  for (int64_t i = 0; i < s[0]; ++i)
    for (int64_t j = 0; j < s[1]; ++j)
      for (int64_t k = 0; k < s[2]; ++k) {
        Extent3 src{i, j, k};
        src[axis] = s[axis] - 1 - src[axis];
        const auto a = flat_index(s, i, j, k), b = flat_index(s, src[0], src[1], src[2]);
        out.intensity[a] = sample.intensity[b];
        out.labels[a] = sample.labels[b];
      }
  return out;
}

VolumeSample rotate(const VolumeSample& sample, int axis, double degrees) {
  if (axis < 0 || axis > 2) throw ConfigError("rotation axis must be 0, 1 or 2");
  const int pa = axis == 0 ? 1 : 0, qa = axis == 2 ? 1 : 2;  // in-plane axes
  const auto& s = sample.shape;
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double cp = 0.5 * static_cast<double>(s[pa] - 1), cq = 0.5 * static_cast<double>(s[qa] - 1);
  const float fill = min_value(sample.intensity);
  VolumeSample out = sample;
  for (int64_t i = 0; i < s[0]; ++i)
    for (int64_t j = 0; j < s[1]; ++j)
      for (int64_t k = 0; k < s[2]; ++k) {
        const Extent3 d{i, j, k};
        const double x = static_cast<double>(d[pa]) - cp, y = static_cast<double>(d[qa]) - cq;
        // inverse rotation maps the destination onto the source grid
        const double sp = c * x + sn * y + cp, sq = -sn * x + c * y + cq;
        const auto np = static_cast<int64_t>(std::lround(sp)), nq = static_cast<int64_t>(std::lround(sq));
        const auto dst = flat_index(s, i, j, k);
        if (np < 0 || nq < 0 || np >= s[pa] || nq >= s[qa]) {
          out.intensity[dst] = fill;
          out.labels[dst] = background;
          continue;
        }
        Extent3 n = d;
        n[pa] = np;
        n[qa] = nq;
        out.labels[dst] = sample.labels[flat_index(s, n[0], n[1], n[2])];
        const double fp = std::clamp(sp, 0.0, static_cast<double>(s[pa] - 1));
        const double fq = std::clamp(sq, 0.0, static_cast<double>(s[qa] - 1));
        const auto p0 = static_cast<int64_t>(std::floor(fp)), q0 = static_cast<int64_t>(std::floor(fq));
        const int64_t p1 = std::min(p0 + 1, s[pa] - 1), q1 = std::min(q0 + 1, s[qa] - 1);
        const double wp = fp - static_cast<double>(p0), wq = fq - static_cast<double>(q0);
        auto at = [&](int64_t pp, int64_t qq) {
          Extent3 e = d;
          e[pa] = pp;
          e[qa] = qq;
          return static_cast<double>(sample.intensity[flat_index(s, e[0], e[1], e[2])]);
        };
        const double v = (at(p0, q0) * (1 - wq) + at(p0, q1) * wq) * (1 - wp) + (at(p1, q0) * (1 - wq) + at(p1, q1) * wq) * wp;
        out.intensity[dst] = static_cast<float>(v);
      }
  return out;
}

VolumeSample augment(const VolumeSample& sample, const TrainConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick_axis(0, 2);
  VolumeSample out = sample;
  // Both draws always happen so the stream position never depends on outcomes.
  const double r = unit(rng);
  const int rot_axis = pick_axis(rng);
  const double angle = (2.0 * unit(rng) - 1.0) * config.rotate_max_deg;
  const double f = unit(rng);
  const int flip_axis = pick_axis(rng);
  if (r < config.rotate_prob) out = rotate(out, rot_axis, angle);
  if (f < config.flip_prob) out = flip(out, flip_axis);
  return out;
}

// ---------------------------------------------------------------------------
// preprocessing

namespace {

void zscore(std::vector<float>& v) {
  double mean = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(v.size())), 1e-6);
  for (auto& x : v) x = static_cast<float>((x - mean) / sd);
}

void check_box(const Box& box, const Extent3& shape) {
  for (int a = 0; a < 3; ++a) {
    if (box.lo[a] < 0 || box.hi[a] >= shape[a] || box.lo[a] > box.hi[a]) {
      throw DataError("crop box does not lie within the volume");
    }
  }
}

ModelInput finish(std::vector<float> intensity, std::vector<uint8_t> labels, int64_t s, Extent3 offset) {
  zscore(intensity);
  ModelInput in;
  in.image = Tensor({1, 1, s, s, s}, std::move(intensity));
  in.labels = std::move(labels);
  in.offset = offset;
  return in;
}

void warn_padding(const Extent3& shape, int64_t target) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    std::cerr << "warning: volume " << shape[0] << "x" << shape[1] << "x" << shape[2] << " is smaller than the "
              << target << "^3 patch; padding with background\n";
  }
}

}  // namespace

ModelInput preprocess(const VolumeSample& sample, InputMode mode, int64_t target_extent, const Box* box,
                      std::mt19937_64* rng) {
  if (target_extent < 1) throw ConfigError("target extent must be positive");
  const Extent3 target{target_extent, target_extent, target_extent};
  switch (mode) {
    case InputMode::downsample:
      return finish(resize_intensity(sample.intensity, sample.shape, target), resize_labels(sample.labels, sample.shape, target),
                    target_extent, {0, 0, 0});
    case InputMode::patches: {
      Extent3 origin{0, 0, 0};
      bool padded = false;
      for (int a = 0; a < 3; ++a) {
        const int64_t room = sample.shape[a] - target_extent;
        if (room < 0) {
          padded = true;
          continue;
        }
        if (rng) origin[a] = std::uniform_int_distribution<int64_t>(0, room)(*rng);
      }
      if (padded) warn_padding(sample.shape, target_extent);
      auto sub = crop(sample, origin, target);
      return finish(std::move(sub.intensity), std::move(sub.labels), target_extent, origin);
    }
    case InputMode::crop_then_downsample: {
      if (!box) throw UsageError("crop_then_downsample needs a bounding box");
      check_box(*box, sample.shape);
      auto sub = crop(sample, box->lo, box->size());
      return finish(resize_intensity(sub.intensity, sub.shape, target), resize_labels(sub.labels, sub.shape, target),
                    target_extent, box->lo);
    }
  }
  throw ConfigError("unknown input mode");
}

std::vector<int64_t> tile_origins(int64_t extent, int64_t window) {
  if (window < 1) throw ConfigError("tile window must be positive");
  if (extent <= window) return {0};
  std::vector<int64_t> out;
  for (int64_t o = 0; o + window < extent; o += window) out.push_back(o);
  out.push_back(extent - window);
  return out;
}

namespace {

// Writes argmax over `classes` planes of `probs` (class-major, `voxels` each).
std::vector<uint8_t> argmax_planes(const std::vector<float>& probs, int64_t classes, int64_t voxels) {
  std::vector<uint8_t> out(static_cast<size_t>(voxels), 0);
  for (int64_t v = 0; v < voxels; ++v) {
    int64_t best = 0;
    float best_p = probs[v];
    for (int64_t c = 1; c < classes; ++c) {
      const float p = probs[c * voxels + v];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    out[v] = static_cast<uint8_t>(best);
  }
  return out;
}

// Resizes each class plane from `from` to `to`.
std::vector<float> resize_planes(std::span<const float> probs, int64_t classes, const Extent3& from, const Extent3& to) {
  const int64_t vin = voxel_count(from), vout = voxel_count(to);
  std::vector<float> out(static_cast<size_t>(classes * vout));
  for (int64_t c = 0; c < classes; ++c) {
    auto plane = resize_intensity(probs.subspan(static_cast<size_t>(c * vin), static_cast<size_t>(vin)), from, to);
    std::copy(plane.begin(), plane.end(), out.begin() + c * vout);
  }
  return out;
}

}  // namespace

LabelVolume predict(const Model<float>& model, const VolumeSample& sample, InputMode mode, const Box* box) {
  NoGradGuard no_grad;
  const int64_t s = model.config().input_extent;
  const int64_t classes = model.config().kind == ModelKind::localizer ? 2 : model.config().num_classes;
  const Extent3 cube{s, s, s};
  LabelVolume out{sample.shape, std::vector<uint8_t>(sample.labels.size(), background), sample.spacing_mm};
  auto run = [&](const ModelInput& in) {
    auto p = model.forward(in.image);
    return std::vector<float>(p.data().begin(), p.data().end());
  };
  switch (mode) {
    case InputMode::downsample: {
      auto probs = run(preprocess(sample, mode, s));
      if (sample.shape != cube) probs = resize_planes(probs, classes, cube, sample.shape);
      out.labels = argmax_planes(probs, classes, voxel_count(sample.shape));
      break;
    }
    case InputMode::patches: {
      const int64_t vox = voxel_count(sample.shape);
      std::vector<float> acc(static_cast<size_t>(classes * vox), 0.0f);
      std::vector<float> hits(static_cast<size_t>(vox), 0.0f);
      const auto ox = tile_origins(sample.shape[0], s), oy = tile_origins(sample.shape[1], s),
                 oz = tile_origins(sample.shape[2], s);
      for (int64_t x0 : ox)
        for (int64_t y0 : oy)
          for (int64_t z0 : oz) {
            auto sub = crop(sample, {x0, y0, z0}, cube);
            auto probs = run(finish(std::move(sub.intensity), {}, s, {x0, y0, z0}));
            for (int64_t i = 0; i < s && x0 + i < sample.shape[0]; ++i)
              for (int64_t j = 0; j < s && y0 + j < sample.shape[1]; ++j)
                for (int64_t k = 0; k < s && z0 + k < sample.shape[2]; ++k) {
                  const auto dst = flat_index(sample.shape, x0 + i, y0 + j, z0 + k);
                  const auto src = flat_index(cube, i, j, k);
                  hits[dst] += 1;
                  for (int64_t c = 0; c < classes; ++c) acc[c * vox + dst] += probs[c * s * s * s + src];
                }
          }
      for (int64_t c = 0; c < classes; ++c)
        for (int64_t v = 0; v < vox; ++v) acc[c * vox + v] /= hits[v];
      out.labels = argmax_planes(acc, classes, vox);
      break;
    }
    case InputMode::crop_then_downsample: {
      if (!box) throw UsageError("crop_then_downsample needs a bounding box");
      auto probs = run(preprocess(sample, mode, s, box));
      const Extent3 size = box->size();
      if (size != cube) probs = resize_planes(probs, classes, cube, size);
      const auto labels = argmax_planes(probs, classes, voxel_count(size));
      for (int64_t i = 0; i < size[0]; ++i)
        for (int64_t j = 0; j < size[1]; ++j)
          for (int64_t k = 0; k < size[2]; ++k) {
            out.labels[flat_index(sample.shape, box->lo[0] + i, box->lo[1] + j, box->lo[2] + k)] =
                labels[flat_index(size, i, j, k)];
          }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loop

const Box* TrainingData::box_for(int64_t patient_id) const {
  auto it = boxes.find(patient_id);
  return it == boxes.end() ? nullptr : &it->second;
}

namespace {

std::string volume_id(const VolumeSample& v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%03lld_t%02lld", static_cast<long long>(v.patient_id),
                static_cast<long long>(v.timepoint));
  return buf;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

}  // namespace

std::string TrainingTrace::to_csv(bool include_wall_time) const {
  std::ostringstream out;
  out << "epoch,iter,lr,train_loss,val_dss_macro,val_hd95_macro";
  if (include_wall_time) out << ",wall_seconds";
  out << '\n';
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.iter << ',' << fmt(e.lr) << ',' << fmt(e.train_loss) << ','
        << (e.val_dss_macro ? fmt(*e.val_dss_macro) : "") << ',' << (e.val_hd95_macro ? fmt(*e.val_hd95_macro) : "");
    if (include_wall_time) out << ',' << fmt(e.wall_seconds);
    out << '\n';
  }
  return out.str();
}

nlohmann::json TrainingTrace::summary() const {
  nlohmann::json j{{"epochs_run", epochs.size()},
                   {"best_epoch", best_epoch},
                   {"best_val_dss_macro", best_val_dss},
                   {"epochs_to_within_0.01_of_best", epochs_to_near_best},
                   {"seconds_to_within_0.01_of_best", seconds_to_near_best},
                   {"wall_seconds", wall_seconds}};
  if (!epochs.empty()) j["final_train_loss"] = epochs.back().train_loss;
  return j;
}

int64_t first_within(const std::vector<double>& values, double tolerance) {
  if (values.empty()) return -1;
  const double best = *std::max_element(values.begin(), values.end());
  for (size_t i = 0; i < values.size(); ++i)
    if (values[i] >= best - tolerance) return static_cast<int64_t>(i);
  return -1;
}

MetricsReport evaluate_model(const Model<float>& model, const std::vector<VolumeSample>& samples, InputMode mode,
                             const std::map<int64_t, Box>& boxes, bool cluster_removal) {
  if (samples.empty()) throw UsageError("evaluate_model: no volumes to evaluate");
  std::vector<LabelVolume> preds, truths;
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    const Box* box = nullptr;
    if (mode == InputMode::crop_then_downsample) {
      auto it = boxes.find(s.patient_id);
      if (it == boxes.end()) throw UsageError("no bounding box for patient " + std::to_string(s.patient_id));
      box = &it->second;
    }
    preds.push_back(predict(model, s, mode, box));
    truths.push_back(s.label_volume());
    ids.push_back(volume_id(s));
  }
  return evaluate(preds, truths, ids, cluster_removal);
}

std::pair<double, double> validation_scores(const Model<float>& model, const std::vector<VolumeSample>& samples,
                                            InputMode mode, const std::map<int64_t, Box>& boxes) {
  if (model.config().kind != ModelKind::localizer) {
    const auto report = evaluate_model(model, samples, mode, boxes);
    return {report.macro_dss, report.macro_hd95};
  }
  if (samples.empty()) throw UsageError("validation_scores: no volumes to evaluate");
  double dss = 0, hd = 0;
  for (const auto& s : samples) {
    const auto it = boxes.find(s.patient_id);
    const auto pred = predict(model, s, mode, it == boxes.end() ? nullptr : &it->second);
    const auto truth = s.label_volume();
    dss += dice_score(pred, truth, 1);
    hd += hd95(pred, truth, 1);
  }
  const auto n = static_cast<double>(samples.size());
  return {dss / n, hd / n};
}

TrainingTrace fit(Model<float>& model, const TrainingData& data, const TrainConfig& config, const FitCallbacks& callbacks,
                  AdamState<float>* adam) {
  config.validate();
  const int64_t s = config.target_extent;
  if (model.config().input_extent != s) {
    throw ConfigError("model input extent " + std::to_string(model.config().input_extent) +
                      " does not match target_extent " + std::to_string(s));
  }
  if (data.train.empty()) throw UsageError("fit: the training split is empty");
  if (config.input_mode == InputMode::crop_then_downsample) {
    for (const auto* split : {&data.train, &data.val})
      for (const auto& v : *split)
        if (!data.box_for(v.patient_id)) throw UsageError("no bounding box for patient " + std::to_string(v.patient_id));
  }
  const int64_t classes = model.config().kind == ModelKind::localizer ? 2 : model.config().num_classes;
  for (const auto& v : data.train) v.label_volume().validate(static_cast<int>(classes));

  AdamState<float> local_state;
  if (!adam) {
    local_state = AdamState<float>(model.parameters());
    adam = &local_state;
  }
  TrainingTrace trace;
  const auto n_train = static_cast<int64_t>(data.train.size());
  const int64_t per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
  const int64_t max_iters = config.epochs * per_epoch;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  int64_t iter = 0;
  double best = -1.0;
  bool stop = false;

  for (int64_t epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq shuffle_seed{config.seed, static_cast<uint64_t>(epoch), uint64_t{0x5eed}};
    std::mt19937_64 shuffle_rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0;
    int64_t steps = 0;
    for (int64_t b = 0; b < per_epoch; ++b) {
      const int64_t lo = b * config.batch_size, hi = std::min(n_train, lo + config.batch_size);
      std::vector<float> images;
      std::vector<uint8_t> labels;
      for (int64_t pos = lo; pos < hi; ++pos) {
        const auto& sample = data.train[static_cast<size_t>(order[static_cast<size_t>(pos)])];
        std::seed_seq sample_seed{config.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(pos), uint64_t{1}};
        std::mt19937_64 rng(sample_seed);
        const auto aug = augment(sample, config, rng);
        auto in = preprocess(aug, config.input_mode, s, data.box_for(sample.patient_id), &rng);
        images.insert(images.end(), in.image.data().begin(), in.image.data().end());
        labels.insert(labels.end(), in.labels.begin(), in.labels.end());
      }
      const int64_t batch = hi - lo;
      Tensor x({batch, 1, s, s, s}, std::move(images));
      model.parameters().zero_grad();
      auto loss = dice_ce_loss(model.forward(x), labels, config.exclude_background, nullptr, config.ce_voxels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        const auto& first = data.train[static_cast<size_t>(order[static_cast<size_t>(lo)])];
        throw TrainingError("non-finite loss " + fmt(value) + " at epoch " + std::to_string(epoch) + ", iteration " +
                            std::to_string(iter) + " (batch starting with " + volume_id(first) + ", lr " +
                            fmt(poly_lr(config.base_lr, iter, max_iters, config.poly_power)) + ")");
      }
      loss.backward();
      rec.lr = poly_lr(config.base_lr, iter, max_iters, config.poly_power);
      adam_step(model.parameters(), *adam, rec.lr);
      ++iter;
      loss_sum += value;
      ++steps;
      if (config.max_wall_seconds > 0 && elapsed() >= config.max_wall_seconds) {
        stop = true;
        break;
      }
    }
    model.parameters().zero_grad();
    rec.iter = iter;
    rec.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(1, steps));
    const bool last = stop || epoch == config.epochs;
    if (!data.val.empty() && (epoch % config.val_every == 0 || last)) {
      const auto [dss, hd] = validation_scores(model, data.val, config.input_mode, data.boxes);
      rec.val_dss_macro = dss;
      rec.val_hd95_macro = hd;
    }
    rec.wall_seconds = elapsed();
    trace.epochs.push_back(rec);
    if (rec.val_dss_macro && *rec.val_dss_macro > best) {
      best = *rec.val_dss_macro;
      trace.best_epoch = epoch;
      trace.best_val_dss = best;
      if (callbacks.on_best) callbacks.on_best(rec, model, *adam);
    }
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  trace.wall_seconds = elapsed();

  std::vector<double> dss;
  std::vector<const EpochRecord*> with_val;
  for (const auto& e : trace.epochs)
    if (e.val_dss_macro) {
      dss.push_back(*e.val_dss_macro);
      with_val.push_back(&e);
    }
  const int64_t idx = first_within(dss, 0.01);
  if (idx >= 0) {
    trace.epochs_to_near_best = with_val[static_cast<size_t>(idx)]->epoch;
    trace.seconds_to_near_best = with_val[static_cast<size_t>(idx)]->wall_seconds;
  }
  return trace;
}

}  // namespace trunet
