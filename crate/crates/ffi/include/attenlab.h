#ifndef ATTENLAB_H
#define ATTENLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum AttenlabStatus {
  ATTENLAB_STATUS_OK = 0,
  ATTENLAB_STATUS_NULL_POINTER = 1,
  ATTENLAB_STATUS_DIMENSION = 2,
  ATTENLAB_STATUS_CONTRACT = 3,
  ATTENLAB_STATUS_NUMERIC = 4,
  ATTENLAB_STATUS_FORMAT = 5,
  ATTENLAB_STATUS_CONFIG = 6,
  ATTENLAB_STATUS_INPUT = 7,
  ATTENLAB_STATUS_IO = 8,
  /**
   * A bug: the call panicked.
   */
  ATTENLAB_STATUS_INTERNAL = 9,
} AttenlabStatus;

/**
 * Opaque model handle.
 */
typedef struct AttenlabModel AttenlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call on this thread.
 */
const char *attenlab_last_error(void);

/**
 * Load a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AttenlabStatus attenlab_model_load(const char *path, struct AttenlabModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`attenlab_model_load`] and not be used again.
 */
void attenlab_model_free(struct AttenlabModel *model);

/**
 * Number of output classes.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum AttenlabStatus attenlab_model_classes(const struct AttenlabModel *model, size_t *out);

/**
 * Side length images are resized to before inference.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum AttenlabStatus attenlab_model_input_size(const struct AttenlabModel *model, size_t *out);

/**
 * Class probabilities for one interleaved 8-bit RGB image of
 * `width*height*3` bytes. `probs` receives `probs_len` values, which must
 * equal the class count.
 *
 * # Safety
 * `rgb` must hold `width*height*3` bytes and `probs` room for `probs_len`
 * doubles.
 */
enum AttenlabStatus attenlab_model_predict_rgb(const struct AttenlabModel *model,
                                               const uint8_t *rgb,
                                               size_t width,
                                               size_t height,
                                               double *probs,
                                               size_t probs_len);

/**
 * Exact binomial interval for `k` successes out of `n` at confidence `conf`.
 *
 * # Safety
 * `lo` and `hi` must be valid.
 */
enum AttenlabStatus attenlab_clopper_pearson(size_t k,
                                             size_t n,
                                             double conf,
                                             double *lo,
                                             double *hi);

/**
 * Area under the ROC curve; `labels[i]` nonzero marks a positive.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
enum AttenlabStatus attenlab_auc(const double *scores,
                                 const uint8_t *labels,
                                 size_t n,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTENLAB_H */
