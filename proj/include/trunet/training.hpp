#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "trunet/metrics.hpp"
#include "trunet/model.hpp"
#include "trunet/optim.hpp"
#include "trunet/volume.hpp"

namespace trunet {

enum class InputMode { downsample, patches, crop_then_downsample };
std::string to_string(InputMode mode);
InputMode input_mode_from_string(const std::string& text);

/// Voxels the cross-entropy term averages over.
enum class CeVoxels { foreground, all };
std::string to_string(CeVoxels scope);
CeVoxels ce_voxels_from_string(const std::string& text);

struct TrainConfig {
  double base_lr = 0.01;
  double poly_power = 0.9;
  int64_t epochs = 10;
  double max_wall_seconds = 0.0;  // 0 disables the wall-time budget
  int64_t batch_size = 1;
  InputMode input_mode = InputMode::downsample;
  int64_t target_extent = 32;
  double rotate_max_deg = 20.0;
  double rotate_prob = 0.5;
  double flip_prob = 0.5;
  uint64_t seed = 0;
  bool exclude_background = true;
  // Background voxels take part in the cross entropy: with the Dice term
  // blind to channel 0, foreground-only CE leaves background unsupervised.
  CeVoxels ce_voxels = CeVoxels::all;
  int64_t val_every = 1;  // epochs between validation passes

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossTerms {
  double dice = 0.0;  // 1 − mean soft Dice over the scored classes
  double ce = 0.0;    // mean −log p_true over the scored voxels
};

/// (Dice loss + cross entropy) / 2 on softmax probabilities [N, C, ...] and
/// integer labels with one entry per voxel of each sample. With
/// `exclude_background` the Dice mean skips channel 0 and, for
/// CeVoxels::foreground, the cross entropy averages only over voxels whose
/// label is foreground (0 when there are none). Soft Dice uses smoothing
/// 1e-5 per sample and class.
template <typename T>
BasicTensor<T> dice_ce_loss(const BasicTensor<T>& probabilities, std::span<const uint8_t> labels,
                            bool exclude_background = true, LossTerms* terms = nullptr,
                            CeVoxels ce_voxels = CeVoxels::foreground);

inline constexpr double kDiceSmoothing = 1e-5;

// ---- resampling -----------------------------------------------------------

/// Trilinear resize with half-voxel-centred sampling (exact copy when the
/// shapes agree).
std::vector<float> resize_intensity(std::span<const float> values, const Extent3& from, const Extent3& to);
/// Nearest-neighbour resize on the same sampling grid.
std::vector<uint8_t> resize_labels(std::span<const uint8_t> labels, const Extent3& from, const Extent3& to);

/// Sub-volume [lo, lo + size) of a sample; voxels outside the source are
/// padded with the minimum intensity and background.
VolumeSample crop(const VolumeSample& sample, const Extent3& lo, const Extent3& size);

/// Mirror along `axis`.
VolumeSample flip(const VolumeSample& sample, int axis);

/// Rotation by `degrees` about `axis` through the volume centre: trilinear
/// intensities, nearest labels, out-of-field voxels filled with the minimum
/// intensity and background.
VolumeSample rotate(const VolumeSample& sample, int axis, double degrees);

/// Random rotation then random flip with the configured probabilities.
VolumeSample augment(const VolumeSample& sample, const TrainConfig& config, std::mt19937_64& rng);

// ---- preprocessing --------------------------------------------------------

struct ModelInput {
  Tensor image;                 // [1, 1, S, S, S], z-scored
  std::vector<uint8_t> labels;  // S³ targets aligned with `image`
  Extent3 offset{0, 0, 0};      // patches mode: sub-volume origin
};

/// Turns a sample into a network input. `rng` picks the patch origin in
/// patches mode (nullptr selects the origin). `box` is required for
/// crop_then_downsample.
ModelInput preprocess(const VolumeSample& sample, InputMode mode, int64_t target_extent, const Box* box = nullptr,
                      std::mt19937_64* rng = nullptr);

/// Per-axis tile origins covering `extent` with windows of `window`; the
/// last tile is aligned to the far edge.
std::vector<int64_t> tile_origins(int64_t extent, int64_t window);

/// Full-resolution label prediction for one sample, inverting the
/// preprocessing of `mode` (crop mode predicts background outside the box).
LabelVolume predict(const Model<float>& model, const VolumeSample& sample, InputMode mode,
                    const Box* box = nullptr);

// ---- training loop ----------------------------------------------------------

struct TrainingData {
  std::vector<VolumeSample> train, val;
  std::map<int64_t, Box> boxes;  // per patient, crop mode only

  const Box* box_for(int64_t patient_id) const;
};

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  int64_t iter = 0;   // optimizer steps taken so far
  double lr = 0.0;    // learning rate of the last step
  double train_loss = 0.0;
  std::optional<double> val_dss_macro, val_hd95_macro;
  double wall_seconds = 0.0;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
  int64_t best_epoch = 0;  // 0 when no validation ran
  double best_val_dss = 0.0;
  // First epoch whose validation macro DSS is within 0.01 of the best.
  int64_t epochs_to_near_best = 0;
  double seconds_to_near_best = 0.0;
  double wall_seconds = 0.0;

  /// epoch,iter,lr,train_loss,val_dss_macro,val_hd95_macro,wall_seconds
  std::string to_csv(bool include_wall_time = true) const;
  nlohmann::json summary() const;
};

struct FitCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Called whenever validation DSS improves, with the model in that state.
  std::function<void(const EpochRecord&, const Model<float>&, const AdamState<float>&)> on_best;
};

/// Trains with Adam and the poly schedule over max_iters = epochs ×
/// ceil(train / batch). Every sample draws augmentation randomness from a
/// stream seeded by (seed, epoch, position), so results do not depend on
/// timing. Throws TrainingError on a non-finite loss.
TrainingTrace fit(Model<float>& model, const TrainingData& data, const TrainConfig& config,
                  const FitCallbacks& callbacks = {}, AdamState<float>* adam = nullptr);

/// Macro DSS and HD95 of `model` over `samples`.
MetricsReport evaluate_model(const Model<float>& model, const std::vector<VolumeSample>& samples, InputMode mode,
                             const std::map<int64_t, Box>& boxes = {}, bool cluster_removal = false);

/// Validation (macro DSS, macro HD95). Localizers score their single
/// foreground class.
std::pair<double, double> validation_scores(const Model<float>& model, const std::vector<VolumeSample>& samples,
                                            InputMode mode, const std::map<int64_t, Box>& boxes = {});

/// Near-best statistic: first index whose value is ≥ max − tolerance.
int64_t first_within(const std::vector<double>& values, double tolerance);

}  // namespace trunet
