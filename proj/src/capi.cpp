#include "trunet/trunet.h"

#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "trunet/checkpoint.hpp"
#include "trunet/error.hpp"
#include "trunet/experiment.hpp"
#include "trunet/metrics.hpp"
#include "trunet/training.hpp"

struct trunet_model {
  trunet::Model<float> model;
};

struct trunet_volume {
  trunet::VolumeSample sample;
};

namespace {

thread_local std::string g_last_error;

// Runs `body`, translating exceptions into status codes.
template <typename F>
trunet_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return TRUNET_OK;
  } catch (const trunet::ConfigError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_CONFIG;
  } catch (const trunet::UsageError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_USAGE;
  } catch (const trunet::DataError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_DATA;
  } catch (const trunet::FormatError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_FORMAT;
  } catch (const trunet::IoError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_IO;
  } catch (const trunet::TrainingError& e) {
    g_last_error = e.what();
    return TRUNET_ERR_TRAINING;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("bad JSON: ") + e.what();
    return TRUNET_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return TRUNET_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TRUNET_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return TRUNET_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw trunet::UsageError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

nlohmann::json parse_json(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return nlohmann::json::object();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw trunet::ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace

extern "C" {

const char* trunet_last_error(void) { return g_last_error.c_str(); }

const char* trunet_status_name(trunet_status status) {
  switch (status) {
    case TRUNET_OK: return "ok";
    case TRUNET_ERR_CONFIG: return "config";
    case TRUNET_ERR_USAGE: return "usage";
    case TRUNET_ERR_DATA: return "data";
    case TRUNET_ERR_FORMAT: return "format";
    case TRUNET_ERR_IO: return "io";
    case TRUNET_ERR_TRAINING: return "training";
    case TRUNET_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* trunet_version(void) { return "0.1.0"; }

void trunet_string_free(char* text) { std::free(text); }

trunet_status trunet_model_create(const char* config_json, uint64_t seed, trunet_model** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto config = trunet::ModelConfig::toy();
    const auto j = parse_json(config_json, "config_json");
    if (!j.empty()) from_json(j, config);
    config.validate();
    *out = new trunet_model{trunet::Model<float>(config, seed)};
  });
}

trunet_status trunet_model_load(const char* path, trunet_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    *out = new trunet_model{trunet::load_checkpoint(path).model};
  });
}

trunet_status trunet_model_save(const trunet_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    trunet::save_checkpoint(model->model, path);
  });
}

trunet_status trunet_model_summary(const trunet_model* model, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    nlohmann::json j{{"config", model->model.config()}, {"architecture", model->model.summary().to_json()}};
    *out_json = dup_string(j.dump(2));
  });
}

trunet_status trunet_model_predict(const trunet_model* model, const trunet_volume* volume, const char* input_mode,
                                   trunet_volume** out) {
  return guarded([&] {
    require(model, "model");
    require(volume, "volume");
    require(out, "out");
    *out = nullptr;
    const auto mode = trunet::input_mode_from_string(input_mode ? input_mode : "downsample");
    if (mode == trunet::InputMode::crop_then_downsample) {
      throw trunet::UsageError("crop_then_downsample needs a box; use the evaluate command");
    }
    auto result = std::make_unique<trunet_volume>();
    result->sample = volume->sample;
    result->sample.labels = trunet::predict(model->model, volume->sample, mode).labels;
    *out = result.release();
  });
}

void trunet_model_free(trunet_model* model) { delete model; }

trunet_status trunet_volume_create(const int64_t shape[3], const float* intensity, const uint8_t* labels,
                                   trunet_volume** out) {
  return guarded([&] {
    require(shape, "shape");
    require(intensity, "intensity");
    require(out, "out");
    *out = nullptr;
    auto v = std::make_unique<trunet_volume>();
    v->sample.shape = {shape[0], shape[1], shape[2]};
    for (int a = 0; a < 3; ++a)
      if (shape[a] <= 0) throw trunet::ConfigError("volume shape must be positive");
    const auto n = static_cast<size_t>(trunet::voxel_count(v->sample.shape));
    v->sample.intensity.assign(intensity, intensity + n);
    v->sample.labels = labels ? std::vector<uint8_t>(labels, labels + n) : std::vector<uint8_t>(n, 0);
    v->sample.validate();
    *out = v.release();
  });
}

trunet_status trunet_volume_load(const char* path, trunet_volume** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    *out = new trunet_volume{trunet::load_volume(path)};
  });
}

trunet_status trunet_volume_save(const trunet_volume* volume, const char* path) {
  return guarded([&] {
    require(volume, "volume");
    require(path, "path");
    trunet::save_volume(volume->sample, path);
  });
}

trunet_status trunet_volume_shape(const trunet_volume* volume, int64_t out_shape[3]) {
  return guarded([&] {
    require(volume, "volume");
    require(out_shape, "out_shape");
    for (int a = 0; a < 3; ++a) out_shape[a] = volume->sample.shape[a];
  });
}

trunet_status trunet_volume_intensity(const trunet_volume* volume, const float** out) {
  return guarded([&] {
    require(volume, "volume");
    require(out, "out");
    *out = volume->sample.intensity.data();
  });
}

trunet_status trunet_volume_labels(const trunet_volume* volume, const uint8_t** out) {
  return guarded([&] {
    require(volume, "volume");
    require(out, "out");
    *out = volume->sample.labels.data();
  });
}

void trunet_volume_free(trunet_volume* volume) { delete volume; }

trunet_status trunet_dice(const trunet_volume* pred, const trunet_volume* truth, int class_id, double* out) {
  return guarded([&] {
    require(pred, "pred");
    require(truth, "truth");
    require(out, "out");
    *out = trunet::dice_score(pred->sample.label_volume(), truth->sample.label_volume(), class_id);
  });
}

trunet_status trunet_hd95(const trunet_volume* pred, const trunet_volume* truth, int class_id, double* out) {
  return guarded([&] {
    require(pred, "pred");
    require(truth, "truth");
    require(out, "out");
    *out = trunet::hd95(pred->sample.label_volume(), truth->sample.label_volume(), class_id);
  });
}

trunet_status trunet_run_command(const char* command, const char* options_json, char** out_json) {
  return guarded([&] {
    require(command, "command");
    if (out_json) *out_json = nullptr;
    const auto result = trunet::run_command(command, parse_json(options_json, "options_json"));
    if (out_json) *out_json = dup_string(result.dump(2));
  });
}

}  // extern "C"
