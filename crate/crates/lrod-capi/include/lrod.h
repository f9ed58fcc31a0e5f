/* C interface to the lrod toy detection pipeline. */

#ifndef LROD_H
#define LROD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LrodStatus {
  LROD_STATUS_OK = 0,
  LROD_STATUS_NULL_ARGUMENT = 1,
  LROD_STATUS_INVALID_ARGUMENT = 2,
  LROD_STATUS_IO = 3,
  LROD_STATUS_RUNTIME = 4,
} LrodStatus;

/**
 * Decoded, suppressed detections for one image.
 */
typedef struct LrodDetections LrodDetections;

/**
 * A loaded checkpoint: parameter layout plus the flat parameter vector.
 */
typedef struct LrodModel LrodModel;

/**
 * One detection in image coordinates.
 */
typedef struct LrodBox {
  uint32_t class_id;
  double score;
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} LrodBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *lrod_last_error(void);

/**
 * Load a checkpoint written by the `lrod` trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrodStatus lrod_model_load(const char *path, struct LrodModel **out);

/**
 * # Safety
 * `model` must come from `lrod_model_load` and not be freed twice.
 */
void lrod_model_free(struct LrodModel *model);

/**
 * Number of parameters in the loaded model.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum LrodStatus lrod_model_param_count(const struct LrodModel *model, uintptr_t *out);

/**
 * Copy the checkpoint's mode tag into `buf` (NUL-terminated, truncated to
 * `cap` bytes).
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes.
 */
enum LrodStatus lrod_model_mode(const struct LrodModel *model, char *buf, uintptr_t cap);

/**
 * Run the detector on one image and return decoded, NMS-filtered boxes.
 *
 * # Safety
 * `image` must hold `3 * height * width` doubles; `out` must be valid.
 */
enum LrodStatus lrod_model_detect(const struct LrodModel *model,
                                  const double *image,
                                  uintptr_t height,
                                  uintptr_t width,
                                  double score_threshold,
                                  double nms_iou,
                                  struct LrodDetections **out);

/**
 * # Safety
 * `dets` must come from `lrod_model_detect` and not be freed twice.
 */
void lrod_detections_free(struct LrodDetections *dets);

/**
 * Number of boxes in a detection result. Null yields 0.
 *
 * # Safety
 * `dets` must be valid or null.
 */
uintptr_t lrod_detections_len(const struct LrodDetections *dets);

/**
 * Fetch one box by index.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum LrodStatus lrod_detections_get(const struct LrodDetections *dets,
                                    uintptr_t index,
                                    struct LrodBox *out);

/**
 * Restore one degraded image in place of `out_image` (same layout as input).
 *
 * # Safety
 * Both image buffers must hold `3 * height * width` doubles.
 */
enum LrodStatus lrod_model_restore(const struct LrodModel *model,
                                   const double *image,
                                   uintptr_t height,
                                   uintptr_t width,
                                   double *out_image);

/**
 * Power-iteration estimate of the detector's input Jacobian spectral norm
 * at one image.
 *
 * # Safety
 * `image` must hold `3 * height * width` doubles; `out_sigma` must be valid.
 */
enum LrodStatus lrod_spectral_norm(const struct LrodModel *model,
                                   const double *image,
                                   uintptr_t height,
                                   uintptr_t width,
                                   uint32_t max_iters,
                                   double tol,
                                   uint64_t seed,
                                   double *out_sigma);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LROD_H */
