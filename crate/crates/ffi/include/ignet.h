#ifndef IGNET_H
#define IGNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IgnetStatus {
  IGNET_STATUS_OK = 0,
  IGNET_STATUS_NULL_POINTER = 1,
  IGNET_STATUS_INVALID_ARGUMENT = 2,
  IGNET_STATUS_SHAPE = 3,
  IGNET_STATUS_CONFIG = 4,
  IGNET_STATUS_DATA = 5,
  IGNET_STATUS_NON_FINITE = 6,
  IGNET_STATUS_CHECKPOINT = 7,
  IGNET_STATUS_IO = 8,
  IGNET_STATUS_INTERNAL = 9,
} IgnetStatus;

typedef enum IgnetInversion {
  /**
   * `1 - alpha * m` on masks in `[0, 1]`.
   */
  IGNET_INVERSION_T1 = 1,
  /**
   * `sigmoid(1 / m)` on masks in `[0, 1]`.
   */
  IGNET_INVERSION_T2 = 2,
  /**
   * `sigmoid(-z)` on pre-sigmoid logits.
   */
  IGNET_INVERSION_T3 = 3,
} IgnetInversion;

/**
 * Opaque model handle.
 */
typedef struct IgnetModel IgnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ignet_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from this thread.
 */
const char *ignet_last_error(void);

/**
 * Builds the three-stage mini residual network for `3 x side x side`
 * inputs. `attention` uses the CLI grammar, e.g. `"cbam-ign1:alpha=0.5"`.
 *
 * # Safety
 * `attention` must be a valid C string and `out` a writable pointer.
 */
enum IgnetStatus ignet_model_new(const char *attention,
                                 size_t num_classes,
                                 size_t side,
                                 uint64_t seed,
                                 struct IgnetModel **out);

/**
 * Loads a checkpoint written by `ignet train` or [`ignet_model_save`].
 *
 * # Safety
 * `path` must be a valid C string and `out` a writable pointer.
 */
enum IgnetStatus ignet_model_load(const char *path, struct IgnetModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a valid C string.
 */
enum IgnetStatus ignet_model_save(struct IgnetModel *model, const char *path);

/**
 * Eval-mode logits for `n` images of raw `[0, 1]` pixels in NCHW order.
 * The checkpoint's normalization is applied first (identity for new
 * models). `input_len` must be `n * 3 * side * side` and `output_len`
 * `n * num_classes`.
 *
 * # Safety
 * `input` and `output` must point to `input_len` and `output_len` doubles.
 */
enum IgnetStatus ignet_model_forward(struct IgnetModel *model,
                                     const double *input,
                                     size_t n,
                                     size_t input_len,
                                     double *output,
                                     size_t output_len);

/**
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum IgnetStatus ignet_model_num_classes(const struct IgnetModel *model, size_t *out);

/**
 * Writes `(C, H, W)` of one input image to `out[0..3]`.
 *
 * # Safety
 * `model` must come from this library and `out` point to three `size_t`.
 */
enum IgnetStatus ignet_model_input_shape(const struct IgnetModel *model, size_t *out);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum IgnetStatus ignet_model_param_count(const struct IgnetModel *model, size_t *out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ignet_model_free(struct IgnetModel *model);

/**
 * Applies an inversion elementwise. T1 and T2 read masks in `[0, 1]`; T3
 * reads logits. `alpha` is used by T1 only and must lie in `[0, 1]`.
 *
 * # Safety
 * `values` and `out` must point to `len` doubles; they may alias.
 */
enum IgnetStatus ignet_invert(enum IgnetInversion kind,
                              double alpha,
                              const double *values,
                              size_t len,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IGNET_H */
