#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trunet/model.hpp"
#include "trunet/phantom.hpp"
#include "trunet/training.hpp"

namespace trunet {

struct LocalizeSettings {
  // Box margin in voxels; unset means 20 voxels at 224 scaled to the
  // phantom extent.
  std::optional<int64_t> margin;
  int64_t epochs = 6;
  double base_lr = 0.01;
  std::vector<int64_t> unet_channels{8, 16, 32, 64, 128};

  int64_t effective_margin(int64_t extent) const;
};

/// Everything one experiment needs, serialized as a single JSON document.
/// Paths default to <out_dir>/data for the dataset and
/// <out_dir>/localize/boxes.json for crop boxes.
struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir = "runs";
  std::string data_dir;    // empty: <out_dir>/data
  std::string boxes_path;  // empty: <out_dir>/localize/boxes.json
  ModelConfig model;
  TrainConfig train;
  PhantomSpec phantom;
  LocalizeSettings localize;

  /// Desk-scale defaults: 32³ phantoms, 12 patients (8/2/2), 5 timepoints,
  /// the toy TRUNet, 20 epochs.
  static ExperimentConfig toy();

  std::string dataset_dir() const;
  std::string boxes_file() const;
  /// Model config for `kind` with the shared extent.
  ModelConfig model_for(ModelKind kind) const;
  /// Validates every part and their consistency; throws ConfigError.
  void validate() const;
};

/// Reads on top of the current values. `seed` is the single seed for data,
/// initialization and augmentation: the top-level value wins, then
/// train.seed, then phantom.seed, and the nested copies are synced to it.
/// A top-level input_mode overrides train.input_mode.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);

/// Loads a config file over the toy defaults.
ExperimentConfig load_experiment_config(const std::string& path);

/// Runs one CLI command. `options` carries the command's flags:
///   common: config (path), seed, out_dir, data_dir, verbose
///   gen-data: patients, timepoints, extent, train_patients, val_patients
///   localize: margin, epochs
///   train: model, input_mode, epochs, boxes
///   evaluate: checkpoint, split, cluster_removal, boxes
///   gradcheck: op
///   compare: epochs
/// The whole configuration is validated before anything is written. The
/// result is the command's summary document.
nlohmann::json run_command(const std::string& command, const nlohmann::json& options);

/// Command names in CLI order.
const std::vector<std::string>& command_names();

}  // namespace trunet
