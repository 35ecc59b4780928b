#ifndef VDTR_H
#define VDTR_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VdtrStatus {
  VDTR_STATUS_OK = 0,
  VDTR_STATUS_NULL_POINTER = 1,
  VDTR_STATUS_INVALID_ARGUMENT = 2,
  VDTR_STATUS_CONTRACT = 3,
  VDTR_STATUS_CONFIG = 4,
  VDTR_STATUS_FORMAT = 5,
  VDTR_STATUS_IO = 6,
  VDTR_STATUS_NON_FINITE = 7,
  VDTR_STATUS_PANIC = 8,
} VdtrStatus;

typedef enum VdtrAttnMode {
  VDTR_ATTN_MODE_GLOBAL = 0,
  VDTR_ATTN_MODE_WINDOW = 1,
} VdtrAttnMode;

// Opaque model handle.
typedef struct VdtrModel VdtrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *vdtr_last_error_message(void);

// Static description of a status code.
const char *vdtr_status_string(enum VdtrStatus status);

// Fresh desk-preset model with `neighbors` frames on each side of the
// reference. A fresh model returns the central frame unchanged.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum VdtrStatus vdtr_model_new(uint64_t seed, size_t neighbors, struct VdtrModel **out);

// Model stored in a checkpoint file. `*out` is left untouched on failure.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum VdtrStatus vdtr_model_load(const char *path, struct VdtrModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void vdtr_model_free(struct VdtrModel *model);

// Frames per clip (`2N+1`), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t vdtr_model_frames(const struct VdtrModel *model);

// Restores the central frame of a clip.
//
// `frames` holds `num_frames` consecutive `3×height×width` images; `out`
// receives one clamped `3×height×width` image.
//
// # Safety
// `model` must be a live handle; `frames` must hold
// `num_frames·3·height·width` values and `out` `3·height·width` writable
// values, not overlapping.
enum VdtrStatus vdtr_model_deblur(const struct VdtrModel *model,
                                  const double *frames,
                                  size_t num_frames,
                                  size_t height,
                                  size_t width,
                                  double *out);

// PSNR in dB between two arrays of `len` values, capped at 99 dB.
//
// # Safety
// `pred` and `target` must hold `len` values; `out` must be writable.
enum VdtrStatus vdtr_psnr(const double *pred,
                          const double *target,
                          size_t len,
                          double peak,
                          double *out);

// SSIM of two `3×height×width` images on their luma.
//
// # Safety
// `pred` and `target` must hold `3·height·width` values; `out` must be writable.
enum VdtrStatus vdtr_ssim(const double *pred,
                          const double *target,
                          size_t height,
                          size_t width,
                          double *out);

// Analytic and measured multiply-accumulate counts of one attention pass
// over an `height×width×d` map. `window` is ignored for global attention.
//
// # Safety
// `analytic` and `measured` must be writable.
enum VdtrStatus vdtr_attention_cost(enum VdtrAttnMode mode,
                                    size_t height,
                                    size_t width,
                                    size_t d,
                                    size_t window,
                                    uint64_t *analytic,
                                    uint64_t *measured);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VDTR_H */
