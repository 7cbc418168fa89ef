#ifndef YGAN_H
#define YGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function of the C interface.
 */
typedef enum YganStatus {
  YGAN_STATUS_OK = 0,
  YGAN_STATUS_NULL_POINTER = 1,
  YGAN_STATUS_INVALID_ARGUMENT = 2,
  YGAN_STATUS_CONFIG = 3,
  YGAN_STATUS_PROTOCOL = 4,
  YGAN_STATUS_NON_FINITE = 5,
  YGAN_STATUS_CHECKPOINT = 6,
  YGAN_STATUS_IO = 7,
  YGAN_STATUS_PANIC = 8,
} YganStatus;

/**
 * Opaque handle to a trained model.
 */
typedef struct YganModel YganModel;

/**
 * Shape of the model behind a handle.
 */
typedef struct YganModelInfo {
  size_t image_size;
  size_t channels;
  size_t latent_dim;
  size_t num_classes;
  bool has_classifier;
} YganModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ygan_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *ygan_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a handle that must be
 * released with [`ygan_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum YganStatus ygan_model_load(const char *path, struct YganModel **out);

/**
 * Releases a handle from [`ygan_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ygan_model_free(struct YganModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum YganStatus ygan_model_info(const struct YganModel *model, struct YganModelInfo *out);

/**
 * Anomaly scores of `n` images, higher meaning more anomalous.
 *
 * `method` is one of `"s"` (one minus the largest class probability),
 * `"s_c"` (class entropy), `"s_x"` (pixel reconstruction error), `"s_z"`
 * and `"s_zs"` (latent reconstruction cosine distance). `pixels` holds
 * `n * C * H * W` values; `scores` receives `n` values.
 *
 * # Safety
 * The arrays must hold at least the stated number of elements.
 */
enum YganStatus ygan_model_score(const struct YganModel *model,
                                 const char *method,
                                 const float *pixels,
                                 size_t n,
                                 double *scores);

/**
 * Semantic codes of `n` images; `codes` receives `n * latent_dim` values
 * in row-major order.
 *
 * # Safety
 * The arrays must hold at least the stated number of elements.
 */
enum YganStatus ygan_model_encode(const struct YganModel *model,
                                  const float *pixels,
                                  size_t n,
                                  double *codes);

/**
 * Area under the ROC curve; `labels[i]` is 1 for anomalous and 0 for normal.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements and `out` must be valid.
 */
enum YganStatus ygan_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Equal error rate and the threshold that attains it.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements and the outputs must be valid.
 */
enum YganStatus ygan_eer(const double *scores,
                         const uint8_t *labels,
                         size_t n,
                         double *threshold,
                         double *eer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* YGAN_H */
