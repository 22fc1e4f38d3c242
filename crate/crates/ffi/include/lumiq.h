#ifndef LUMIQ_H
#define LUMIQ_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `Ok` is zero; everything else is an error.
 */
typedef enum LumiqStatus {
  LUMIQ_STATUS_OK = 0,
  LUMIQ_STATUS_NULL_POINTER = 1,
  LUMIQ_STATUS_INVALID_ARGUMENT = 2,
  LUMIQ_STATUS_SHAPE = 3,
  LUMIQ_STATUS_DEGENERATE = 4,
  LUMIQ_STATUS_INCOMPATIBLE = 5,
  LUMIQ_STATUS_PARSE = 6,
  LUMIQ_STATUS_CORRUPT = 7,
  LUMIQ_STATUS_IO = 8,
  LUMIQ_STATUS_DIVERGENCE = 9,
  LUMIQ_STATUS_PANIC = 10,
} LumiqStatus;

/**
 * A loaded stage-2 model. Opaque to C.
 */
typedef struct LumiqModel LumiqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a stage-2 checkpoint from a file path (UTF-8, nul-terminated).
 *
 * # Safety
 * `path` must be a valid C string and `out` a writable pointer.
 */
enum LumiqStatus lumiq_model_load(const char *path, struct LumiqModel **out);

/**
 * Load a stage-2 checkpoint from an in-memory buffer.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` must be writable.
 */
enum LumiqStatus lumiq_model_load_bytes(const uint8_t *bytes, size_t len, struct LumiqModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a load function and not be used afterwards.
 */
void lumiq_model_free(struct LumiqModel *model);

/**
 * Side length images must be a multiple of.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LumiqStatus lumiq_model_size_multiple(const struct LumiqModel *model, size_t *out);

/**
 * Enhance one low-light image. `output` receives `3 * height * width` doubles.
 *
 * # Safety
 * `input` and `output` must each hold `3 * height * width` doubles.
 */
enum LumiqStatus lumiq_enhance(const struct LumiqModel *model,
                               const double *input,
                               size_t height,
                               size_t width,
                               double *output);

/**
 * PSNR in dB between two images with peak value `max_val`.
 *
 * # Safety
 * `a` and `b` must each hold `3 * height * width` doubles; `out` writable.
 */
enum LumiqStatus lumiq_psnr(const double *a,
                            const double *b,
                            size_t height,
                            size_t width,
                            double max_val,
                            double *out);

/**
 * Mean SSIM between two images.
 *
 * # Safety
 * `a` and `b` must each hold `3 * height * width` doubles; `out` writable.
 */
enum LumiqStatus lumiq_ssim(const double *a,
                            const double *b,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * Message for the last failure on this thread, or null if the last call
 * succeeded. Valid until the next call on the same thread.
 */
const char *lumiq_last_error(void);

/**
 * Library version as a static C string.
 */
const char *lumiq_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LUMIQ_H */
