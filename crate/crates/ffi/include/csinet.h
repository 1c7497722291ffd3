#ifndef CSINET_H
#define CSINET_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 5 match the command-line exit codes.
 */
typedef enum CsinetStatus {
  CSINET_STATUS_OK = 0,
  CSINET_STATUS_INTERNAL = 1,
  CSINET_STATUS_CONFIG = 2,
  CSINET_STATUS_IO = 3,
  CSINET_STATUS_NON_FINITE = 4,
  CSINET_STATUS_NOT_IMPLEMENTED = 5,
  CSINET_STATUS_NULL_POINTER = 6,
  CSINET_STATUS_INVALID_ARGUMENT = 7,
  CSINET_STATUS_DIMENSION = 8,
  CSINET_STATUS_PANIC = 9,
} CsinetStatus;

/**
 * Opaque configuration handle.
 */
typedef struct CsinetConfig CsinetConfig;

/**
 * Opaque model handle.
 */
typedef struct CsinetModel CsinetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL after a success. The
 * pointer stays valid until the next call on the same thread.
 */
const char *csinet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *csinet_version(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void csinet_string_free(char *s);

/**
 * New configuration from a preset: `default`, `small`, `tiny` or `toy`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum CsinetStatus csinet_config_new(const char *preset, struct CsinetConfig **out);

/**
 * Set one `key = value` setting.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum CsinetStatus csinet_config_set(struct CsinetConfig *config,
                                    const char *key,
                                    const char *value);

/**
 * `CSINET_STATUS_CONFIG` with every violation in the message, or OK.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum CsinetStatus csinet_config_validate(const struct CsinetConfig *config);

/**
 * Settings as `key = value` lines; free with `csinet_string_free`.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum CsinetStatus csinet_config_to_text(const struct CsinetConfig *config, char **out);

/**
 * # Safety
 * `config` must be NULL or a live handle, and is invalid afterwards.
 */
void csinet_config_free(struct CsinetConfig *config);

/**
 * Freshly initialized model for a configuration.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum CsinetStatus csinet_model_new(const struct CsinetConfig *config, struct CsinetModel **out);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CsinetStatus csinet_model_load(const char *path, struct CsinetModel **out);

/**
 * # Safety
 * `model` must be NULL or a live handle, and is invalid afterwards.
 */
void csinet_model_free(struct CsinetModel *model);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CsinetStatus csinet_model_param_count(const struct CsinetModel *model, uint64_t *out);

/**
 * Side of the masks produced by `csinet_model_predict`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CsinetStatus csinet_model_mask_side(const struct CsinetModel *model, uint32_t *out);

/**
 * Segment the object described by `expression`.
 *
 * `rgb` holds `height * width * 3` values in `[0, 1]`, row-major, channels
 * last. `mask` receives `side * side` bytes of 0 or 1, where `side` is given
 * by `csinet_model_mask_side`. A negative `threshold` uses the model's own.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` floats and `mask` `mask_len` bytes.
 */
enum CsinetStatus csinet_model_predict(const struct CsinetModel *model,
                                       const float *rgb,
                                       uint32_t height,
                                       uint32_t width,
                                       const char *expression,
                                       float threshold,
                                       uint8_t *mask,
                                       size_t mask_len);

/**
 * Intersection, union and IoU of two binary masks of `len` bytes (nonzero is
 * foreground). Two empty masks score 1.
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; outputs may be NULL to skip them.
 */
enum CsinetStatus csinet_iou(const uint8_t *pred,
                             const uint8_t *gt,
                             size_t len,
                             uint64_t *intersection,
                             uint64_t *union_,
                             double *iou);

/**
 * Dilation offsets for a stage-4 side `h4`, slice size and density. Writes
 * `density` offsets to `offsets` (capacity `cap`) and the adjusted side to
 * `h_adjust` when non-NULL.
 *
 * # Safety
 * `offsets` must hold `cap` values.
 */
enum CsinetStatus csinet_dilation_offsets(uint32_t h4,
                                          uint32_t slice_size,
                                          uint32_t density,
                                          uint32_t *offsets,
                                          size_t cap,
                                          uint32_t *h_adjust);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSINET_H */
