#ifndef GEMTRANS_H
#define GEMTRANS_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum GemtStatus {
  GEMT_STATUS_OK = 0,
  GEMT_STATUS_NULL_ARGUMENT = 1,
  GEMT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Output buffer too small; the message names the required length.
   */
  GEMT_STATUS_BUFFER_TOO_SMALL = 3,
  GEMT_STATUS_CONFIG = 4,
  GEMT_STATUS_IO = 5,
  GEMT_STATUS_CHECKPOINT = 6,
  GEMT_STATUS_SHAPE = 7,
  GEMT_STATUS_NUMERIC = 8,
  GEMT_STATUS_INTERNAL = 9,
} GemtStatus;

/**
 * Task selector mirrored from the run config.
 */
typedef enum GemtTask {
  GEMT_TASK_EF = 0,
  GEMT_TASK_AS = 1,
} GemtTask;

/**
 * Opaque model handle.
 */
typedef struct GemtModel GemtModel;

/**
 * Input geometry and output sizes of a loaded model.
 */
typedef struct GemtDims {
  size_t k;
  size_t t;
  size_t h;
  size_t w;
  /**
   * Patches per frame, the length of one spatial attention vector.
   */
  size_t patches;
  /**
   * 1 for EF, 4 for AS.
   */
  size_t outputs;
} GemtDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gemt_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *gemt_last_error(void);

/**
 * Loads a checkpoint. `config_path` may be NULL, in which case `config.txt`
 * next to the checkpoint is read. On success `*out` owns a new handle that
 * must be released with `gemt_model_free`.
 *
 * # Safety
 * Paths must be NUL-terminated strings or NULL; `out` must be writable.
 */
enum GemtStatus gemt_model_load(const char *checkpoint_path,
                                const char *config_path,
                                struct GemtModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from `gemt_model_load` and not be used afterwards.
 */
void gemt_model_free(struct GemtModel *model);

/**
 * Writes the model's input geometry and output size.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum GemtStatus gemt_model_dims(const struct GemtModel *model, struct GemtDims *out);

/**
 * Task the model was trained for.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum GemtStatus gemt_model_task(const struct GemtModel *model, enum GemtTask *out);

/**
 * Predicts one sample. `videos` holds K·T·H·W intensities in [0,1],
 * row-major over (k, t, y, x). EF writes one value, AS four probabilities.
 *
 * # Safety
 * `videos` must point to `videos_len` floats and `out` to `out_len` doubles.
 */
enum GemtStatus gemt_predict(const struct GemtModel *model,
                             const float *videos,
                             size_t videos_len,
                             double *out,
                             size_t out_len);

/**
 * Attention of one sample: `spatial` receives K·T·patches values ordered by
 * (k, t, patch), `temporal` K·T values ordered by (k, t), `video` K values.
 *
 * # Safety
 * Buffers must hold at least the given number of doubles.
 */
enum GemtStatus gemt_attention(const struct GemtModel *model,
                               const float *videos,
                               size_t videos_len,
                               double *spatial,
                               size_t spatial_len,
                               double *temporal,
                               size_t temporal_len,
                               double *video,
                               size_t video_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEMTRANS_H */
