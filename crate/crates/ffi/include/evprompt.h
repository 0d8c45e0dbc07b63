#ifndef EVPROMPT_H
#define EVPROMPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum EvpStatus {
  EVP_STATUS_OK = 0,
  EVP_STATUS_NULL_POINTER = 1,
  EVP_STATUS_INVALID_ARGUMENT = 2,
  EVP_STATUS_BUFFER_TOO_SMALL = 3,
  EVP_STATUS_CONFIG = 4,
  EVP_STATUS_PARSE = 5,
  EVP_STATUS_DATA = 6,
  EVP_STATUS_SHAPE = 7,
  EVP_STATUS_DEGENERATE = 8,
  EVP_STATUS_IO = 9,
  EVP_STATUS_PANIC = 10,
} EvpStatus;

/**
 * Frequency transform selector for [`evp_lowpass`].
 */
typedef enum EvpTransform {
  EVP_TRANSFORM_DCT = 0,
  EVP_TRANSFORM_DFT = 1,
  EVP_TRANSFORM_NONE = 2,
} EvpTransform;

/**
 * Opaque parsed event stream.
 */
typedef struct EvpEvents EvpEvents;

/**
 * Opaque model loaded from a checkpoint.
 */
typedef struct EvpModel EvpModel;

/**
 * Aggregate multi-label metrics.
 */
typedef struct EvpMetrics {
  double ma;
  double acc;
  double precision;
  double recall;
  double f1;
} EvpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *evp_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
 * fit) and returns the full message length in bytes, excluding the NUL. `buf` may be null
 * when `len` is 0, which queries the length.
 *
 * # Safety
 * `buf` must be writable for `len` bytes.
 */
size_t evp_last_error(char *buf, size_t len);

/**
 * Parses an in-memory `EVS1` event file.
 *
 * # Safety
 * `bytes` must be readable for `len` bytes; `out` must be writable.
 */
enum EvpStatus evp_events_parse(const uint8_t *bytes, size_t len, struct EvpEvents **out);

/**
 * Reads an `EVS1` event file from disk.
 *
 * # Safety
 * `file` must be a NUL-terminated path; `out` must be writable.
 */
enum EvpStatus evp_events_read(const char *file, struct EvpEvents **out);

/**
 * Writes the event count and sensor size. Any output pointer may be null.
 *
 * # Safety
 * `events` must be a live handle; non-null outputs must be writable.
 */
enum EvpStatus evp_events_info(const struct EvpEvents *events,
                               size_t *count,
                               size_t *width,
                               size_t *height);

/**
 * Releases an event handle. Null is ignored.
 *
 * # Safety
 * `events` must be null or a handle not yet freed.
 */
void evp_events_free(struct EvpEvents *events);

/**
 * Voxelizes the stream into `frames × 3 × H × W` values at the sensor size.
 *
 * # Safety
 * `events` must be a live handle; `out` must be writable for `out_len` floats.
 */
enum EvpStatus evp_voxelize(const struct EvpEvents *events,
                            size_t frames,
                            float *out,
                            size_t out_len);

/**
 * Low-pass filters a `C × H × W` map, keeping the lowest `keep_fraction` of frequencies
 * per axis. `transform` is an [`EvpTransform`] value. `input` and `out` may alias.
 *
 * # Safety
 * `input` must be readable and `out` writable for `C·H·W` floats.
 */
enum EvpStatus evp_lowpass(const float *input,
                           size_t channels,
                           size_t height,
                           size_t width,
                           double keep_fraction,
                           uint32_t transform,
                           float *out);

/**
 * Loads a checkpoint directory. `bank_dir` may be null to use the checkpoint's own bank.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum EvpStatus evp_model_load(const char *checkpoint_dir,
                              const char *bank_dir,
                              struct EvpModel **out);

/**
 * Input geometry the model expects and its attribute count. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum EvpStatus evp_model_info(const struct EvpModel *model,
                              size_t *rgb_frames,
                              size_t *event_frames,
                              size_t *height,
                              size_t *width,
                              size_t *attributes);

/**
 * Attribute logits for one sample. `rgb` holds `rgb_frames × 3 × H × W` values in [0, 1];
 * the events are voxelized with the model's event frame count.
 *
 * # Safety
 * `model` and `events` must be live handles; `rgb` readable for `rgb_len` floats;
 * `logits` writable for `logits_len` floats.
 */
enum EvpStatus evp_model_infer(const struct EvpModel *model,
                               const float *rgb,
                               size_t rgb_len,
                               const struct EvpEvents *events,
                               float *logits,
                               size_t logits_len);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void evp_model_free(struct EvpModel *model);

/**
 * Ratio-weighted binary cross-entropy over a `batch × attributes` logit matrix, averaged
 * over all elements. `grad` may be null; otherwise it receives the gradient with respect
 * to the logits.
 *
 * # Safety
 * `logits`, `labels`, and `grad` span `batch·attributes` doubles, `ratios` spans
 * `attributes`; `loss` must be writable.
 */
enum EvpStatus evp_weighted_bce(const double *logits,
                                const double *labels,
                                const double *ratios,
                                size_t batch,
                                size_t attributes,
                                double *loss,
                                double *grad);

/**
 * Metrics of logits thresholded at 0 against binary labels, both `batch × attributes`.
 *
 * # Safety
 * `logits` and `labels` span `batch·attributes` doubles; `out` must be writable.
 */
enum EvpStatus evp_metrics(const double *logits,
                           const double *labels,
                           size_t batch,
                           size_t attributes,
                           struct EvpMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVPROMPT_H */
