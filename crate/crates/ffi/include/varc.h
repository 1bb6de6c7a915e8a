#ifndef VARC_H
#define VARC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  VARC_STATUS_OK = 0,
  VARC_STATUS_NULL_POINTER = 1,
  VARC_STATUS_INVALID_ARGUMENT = 2,
  VARC_STATUS_IO = 3,
  VARC_STATUS_DATA = 4,
  VARC_STATUS_MODEL = 5,
  VARC_STATUS_RUNTIME = 6,
  VARC_STATUS_OUT_OF_RANGE = 7,
  VARC_STATUS_BUFFER_TOO_SMALL = 8,
  VARC_STATUS_PANIC = 9,
} VarcStatus;

/**
 * A trained model plus the run configuration stored with it.
 */
typedef struct VarcModel VarcModel;

/**
 * Ranked candidates for each inference input of a task.
 */
typedef struct VarcPrediction VarcPrediction;

typedef struct VarcTask VarcTask;

/**
 * Knobs for [`varc_predict`]. Fill with [`varc_predict_options_default`].
 */
typedef struct {
  uint32_t ttt_epochs;
  uint32_t ttt_warmup_epochs;
  uint32_t ttt_batch_size;
  double ttt_lr;
  uint32_t num_aux;
  uint32_t views_per_aux;
  uint64_t seed;
} VarcPredictOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *varc_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next `varc_*` call on the same thread.
 */
const char *varc_last_error_message(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
VarcStatus varc_model_load(const char *path, VarcModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`varc_model_load`], freed once.
 */
void varc_model_free(VarcModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t varc_model_num_params(const VarcModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t varc_model_canvas_size(const VarcModel *model);

/**
 * Parses one task in ARC JSON format (`{"train": [...], "test": [...]}`).
 *
 * # Safety
 * `json` and `task_id` must be NUL-terminated strings; `out` must be writable.
 */
VarcStatus varc_task_from_json(const char *json, const char *task_id, VarcTask **out);

/**
 * Loads a task file; the task id is the file stem.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
VarcStatus varc_task_load(const char *path, VarcTask **out);

/**
 * # Safety
 * `task` must be null or a live handle, freed once.
 */
void varc_task_free(VarcTask *task);

/**
 * # Safety
 * `task` must be null or a live handle.
 */
size_t varc_task_num_inputs(const VarcTask *task);

/**
 * Fills `out` with the settings stored in `model`'s checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
VarcStatus varc_predict_options_default(const VarcModel *model, VarcPredictOptions *out);

/**
 * Test-time trains a copy of `model` on `task`'s demonstrations, then votes
 * over multiple views for every inference input. `options` may be null to
 * use [`varc_predict_options_default`].
 *
 * # Safety
 * `model` and `task` must be live handles; `options` null or valid; `out`
 * writable.
 */
VarcStatus varc_predict(const VarcModel *model,
                        const VarcTask *task,
                        const VarcPredictOptions *options,
                        VarcPrediction **out);

/**
 * # Safety
 * `pred` must be null or a live handle, freed once.
 */
void varc_prediction_free(VarcPrediction *pred);

/**
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t varc_prediction_num_inputs(const VarcPrediction *pred);

/**
 * Distinct voted grids for input `input`, or 0 when out of range.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t varc_prediction_num_candidates(const VarcPrediction *pred, size_t input);

/**
 * Copies candidate `rank` (0 = most votes) of input `input` into `cells`
 * row-major and writes its shape and vote count. Call with `cells` null to
 * query the shape; `VARC_STATUS_BUFFER_TOO_SMALL` is returned when
 * `cells_len < rows * cols`.
 *
 * # Safety
 * `pred` must be a live handle; `rows`, `cols`, `votes` writable or null;
 * `cells` null or valid for `cells_len` bytes.
 */
VarcStatus varc_prediction_candidate(const VarcPrediction *pred,
                                     size_t input,
                                     size_t rank,
                                     size_t *rows,
                                     size_t *cols,
                                     size_t *votes,
                                     uint8_t *cells,
                                     size_t cells_len);

/**
 * The top two candidates per input in ARC submission JSON. Release with
 * [`varc_string_free`]. Null on failure.
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
char *varc_prediction_to_json(const VarcPrediction *pred);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void varc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARC_H */
