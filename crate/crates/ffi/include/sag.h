#ifndef SAG_H
#define SAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SagStatus {
  SAG_STATUS_OK = 0,
  SAG_STATUS_NULL_POINTER = 1,
  SAG_STATUS_INVALID_ARGUMENT = 2,
  SAG_STATUS_SHAPE = 3,
  SAG_STATUS_IO = 4,
  SAG_STATUS_CHECKPOINT = 5,
  SAG_STATUS_NON_FINITE = 6,
  SAG_STATUS_PANIC = 7,
} SagStatus;

typedef enum SagModelKind {
  SAG_MODEL_KIND_TRANSFORMER = 0,
  SAG_MODEL_KIND_MIL = 1,
} SagModelKind;

/**
 * Opaque model handle.
 */
typedef struct SagModel SagModel;

typedef struct SagModelInfo {
  enum SagModelKind kind;
  size_t feature_dim;
  size_t num_classes;
  size_t num_scales;
  size_t layers;
  size_t heads;
} SagModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *sag_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sag_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a handle to release with
 * [`sag_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SagStatus sag_model_load(const char *path, struct SagModel **out);

/**
 * Releases a handle from [`sag_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle not used afterwards.
 */
void sag_model_free(struct SagModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum SagStatus sag_model_info(const struct SagModel *model, struct SagModelInfo *out);

/**
 * Forward pass on one slide.
 *
 * `grid_shape` holds `(rows, cols)` for each of the model's scales, so
 * `2 * num_scales` entries. `features` holds each scale's `rows * cols`
 * by `feature_dim` matrix, row-major, scales back to back; `n_features`
 * is the total count. `logits` receives `num_classes` values. If
 * `attention` is non-null it receives, per scale, the last layer's mean
 * received attention averaged over heads, `sum(rows * cols)` values.
 *
 * # Safety
 * Every pointer must reference at least the stated number of elements.
 */
enum SagStatus sag_model_forward(const struct SagModel *model,
                                 const double *features,
                                 size_t n_features,
                                 const size_t *grid_shape,
                                 double *logits,
                                 size_t n_logits,
                                 double *attention,
                                 size_t n_attention);

/**
 * Normalizes `n` nonnegative mask area ratios into guidance weights.
 * An all-zero input writes zeros and sets `*degenerate`.
 *
 * # Safety
 * `ratios` and `weights` must reference `n` elements; `degenerate` must be
 * writable.
 */
enum SagStatus sag_guidance_weights(const double *ratios,
                                    size_t n,
                                    double *weights,
                                    bool *degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAG_H */
