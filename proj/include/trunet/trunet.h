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

#ifndef TRUNET_TRUNET_H_
#define TRUNET_TRUNET_H_

#include <stddef.h>
#include <stdint.h>

#if defined(TRUNET_BUILDING_LIBRARY)
#define TRUNET_API __attribute__((visibility("default")))
#else
#define TRUNET_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every call returns a status. On failure the message is available from
 * trunet_last_error() until the next call on the same thread. */
typedef enum trunet_status {
  TRUNET_OK = 0,
  TRUNET_ERR_CONFIG = 1,
  TRUNET_ERR_USAGE = 2,
  TRUNET_ERR_DATA = 3,
  TRUNET_ERR_FORMAT = 4,
  TRUNET_ERR_IO = 5,
  TRUNET_ERR_TRAINING = 6,
  TRUNET_ERR_INTERNAL = 7
} trunet_status;

typedef struct trunet_model trunet_model;
typedef struct trunet_volume trunet_volume;

TRUNET_API const char* trunet_last_error(void);
TRUNET_API const char* trunet_status_name(trunet_status status);
TRUNET_API const char* trunet_version(void);

/* Strings handed out by the library (JSON documents) are released here. */
TRUNET_API void trunet_string_free(char* text);

/* Models. config_json is a model config object; NULL or "{}" gives the toy
 * TRUNet. */
TRUNET_API trunet_status trunet_model_create(const char* config_json, uint64_t seed, trunet_model** out);
TRUNET_API trunet_status trunet_model_load(const char* path, trunet_model** out);
TRUNET_API trunet_status trunet_model_save(const trunet_model* model, const char* path);
/* JSON with the config, parameter count and per-block breakdown. */
TRUNET_API trunet_status trunet_model_summary(const trunet_model* model, char** out_json);
/* Segments a volume. input_mode is "downsample" or "patches"; the result
 * volume carries the predicted labels and a copy of the intensities. */
TRUNET_API trunet_status trunet_model_predict(const trunet_model* model, const trunet_volume* volume,
                                              const char* input_mode, trunet_volume** out);
TRUNET_API void trunet_model_free(trunet_model* model);

/* Volumes (VOL1 files). Labels may be NULL for an unlabelled volume. */
TRUNET_API trunet_status trunet_volume_create(const int64_t shape[3], const float* intensity, const uint8_t* labels,
                                              trunet_volume** out);
TRUNET_API trunet_status trunet_volume_load(const char* path, trunet_volume** out);
TRUNET_API trunet_status trunet_volume_save(const trunet_volume* volume, const char* path);
TRUNET_API trunet_status trunet_volume_shape(const trunet_volume* volume, int64_t out_shape[3]);
/* Borrowed pointers, valid until the volume is freed. */
TRUNET_API trunet_status trunet_volume_intensity(const trunet_volume* volume, const float** out);
TRUNET_API trunet_status trunet_volume_labels(const trunet_volume* volume, const uint8_t** out);
TRUNET_API void trunet_volume_free(trunet_volume* volume);

/* Metrics on the label arrays of two volumes of equal shape. */
TRUNET_API trunet_status trunet_dice(const trunet_volume* pred, const trunet_volume* truth, int class_id, double* out);
TRUNET_API trunet_status trunet_hd95(const trunet_volume* pred, const trunet_volume* truth, int class_id, double* out);

/* Runs one CLI command ("gen-data", "localize", "train", "evaluate",
 * "gradcheck", "compare") with its options as a JSON object. The summary
 * document is returned in *out_json (free with trunet_string_free). */
TRUNET_API trunet_status trunet_run_command(const char* command, const char* options_json, char** out_json);

#ifdef __cplusplus
}
#endif

#endif  // TRUNET_TRUNET_H_
