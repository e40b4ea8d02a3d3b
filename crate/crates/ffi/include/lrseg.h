#ifndef LRSEG_H
#define LRSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrsegStatus {
  LRSEG_STATUS_OK = 0,
  LRSEG_STATUS_NULL_POINTER = 1,
  LRSEG_STATUS_INVALID_ARGUMENT = 2,
  LRSEG_STATUS_IO = 3,
  LRSEG_STATUS_FORMAT = 4,
  LRSEG_STATUS_DIMENSION = 5,
  LRSEG_STATUS_CONFIG = 6,
  LRSEG_STATUS_NUMERIC = 7,
  LRSEG_STATUS_INDEX = 8,
  LRSEG_STATUS_METRIC = 9,
  LRSEG_STATUS_INTERNAL = 10,
} LrsegStatus;

/**
 * A binary mask volume in `(frame, row, col)` order.
 */
typedef struct LrsegMask LrsegMask;

/**
 * A video volume in `(frame, row, col)` order.
 */
typedef struct LrsegVideo LrsegVideo;

/**
 * Outcome of a pipeline run. Metric fields are meaningful only when
 * `has_metrics` is nonzero.
 */
typedef struct LrsegRunSummary {
  size_t roi_top;
  size_t roi_left;
  size_t roi_height;
  size_t roi_width;
  uint8_t has_metrics;
  double mean_i;
  double mean_iou;
  double mean_dc;
} LrsegRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *lrseg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lrseg_version(void);

/**
 * Loads a video volume file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrsegStatus lrseg_video_load(const char *path, struct LrsegVideo **out);

/**
 * Writes a video volume file.
 *
 * # Safety
 * `video` must come from this library and `path` be NUL-terminated.
 */
enum LrsegStatus lrseg_video_save(const struct LrsegVideo *video, const char *path);

/**
 * Builds a video from `frames * height * width` samples in `(frame, row,
 * col)` order.
 *
 * # Safety
 * `data` must point to that many readable doubles and `out` be valid.
 */
enum LrsegStatus lrseg_video_from_data(const double *data,
                                       size_t frames,
                                       size_t height,
                                       size_t width,
                                       double frame_rate_hz,
                                       struct LrsegVideo **out);

/**
 * # Safety
 * `video` must come from this library; the out pointers must be valid.
 */
enum LrsegStatus lrseg_video_dims(const struct LrsegVideo *video,
                                  size_t *frames,
                                  size_t *height,
                                  size_t *width);

/**
 * Copies the samples into `buf`, which must hold exactly
 * `frames * height * width` doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum LrsegStatus lrseg_video_copy_data(const struct LrsegVideo *video, double *buf, size_t len);

/**
 * # Safety
 * `video` must be null or come from this library, and not be used after.
 */
void lrseg_video_free(struct LrsegVideo *video);

/**
 * Loads a mask volume file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrsegStatus lrseg_mask_load(const char *path, struct LrsegMask **out);

/**
 * Writes a mask volume file.
 *
 * # Safety
 * `mask` must come from this library and `path` be NUL-terminated.
 */
enum LrsegStatus lrseg_mask_save(const struct LrsegMask *mask, const char *path);

/**
 * # Safety
 * `mask` must come from this library; the out pointers must be valid.
 */
enum LrsegStatus lrseg_mask_dims(const struct LrsegMask *mask,
                                 size_t *frames,
                                 size_t *height,
                                 size_t *width);

/**
 * Copies the mask as 0/1 bytes into `buf` of exactly `len` elements.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum LrsegStatus lrseg_mask_copy_data(const struct LrsegMask *mask, uint8_t *buf, size_t len);

/**
 * # Safety
 * `mask` must be null or come from this library, and not be used after.
 */
void lrseg_mask_free(struct LrsegMask *mask);

/**
 * Generates the standard 64x64x48 phantom for `seed`. `out_truth` may be
 * null when the reference mask is not wanted.
 *
 * # Safety
 * `out_video` must be valid; `out_truth` must be valid or null.
 */
enum LrsegStatus lrseg_phantom_generate(uint64_t seed,
                                        struct LrsegVideo **out_video,
                                        struct LrsegMask **out_truth);

/**
 * Runs the full pipeline. `config` holds `key = value` lines applied over
 * the defaults and may be null. With a non-null `out_dir` the run
 * artifacts are written there; `force` nonzero allows a non-empty
 * directory. `out_mask` may be null.
 *
 * # Safety
 * String arguments must be NUL-terminated or null as allowed; `summary`
 * must be valid and `out_mask` valid or null.
 */
enum LrsegStatus lrseg_pipeline_run(const char *config,
                                    const char *out_dir,
                                    uint8_t force,
                                    struct LrsegRunSummary *summary,
                                    struct LrsegMask **out_mask);

/**
 * IoU of two byte masks of `len` elements (nonzero is set).
 *
 * # Safety
 * `m` and `gs` must point to `len` readable bytes; `out` must be valid.
 */
enum LrsegStatus lrseg_iou(const uint8_t *m, const uint8_t *gs, size_t len, double *out);

/**
 * Dice coefficient of two byte masks of `len` elements.
 *
 * # Safety
 * As for [`lrseg_iou`].
 */
enum LrsegStatus lrseg_dice(const uint8_t *m, const uint8_t *gs, size_t len, double *out);

/**
 * Share of the `m` region that lies inside `gs`.
 *
 * # Safety
 * As for [`lrseg_iou`].
 */
enum LrsegStatus lrseg_window_accuracy(const uint8_t *m,
                                       const uint8_t *gs,
                                       size_t len,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRSEG_H */
