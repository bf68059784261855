#ifndef DUALCOLOR_H
#define DUALCOLOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_SHAPE_MISMATCH = 3,
  DC_STATUS_NOT_POSITIVE_SEMIDEFINITE = 4,
  DC_STATUS_IO = 5,
  DC_STATUS_CHECKPOINT = 6,
  DC_STATUS_NON_FINITE = 7,
  DC_STATUS_INTERNAL = 8,
  DC_STATUS_PANIC = 9,
} DcStatus;

// A loaded colorization model.
typedef struct DcModel DcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *dc_last_error(void);

// Library version as a static nul-terminated string.
const char *dc_version(void);

// Converts `count` sRGB triples in `[0, 1]` to `[L, a, b]` triples.
//
// # Safety
// `rgb` and `lab` must each point to `3 * count` floats.
enum DcStatus dc_rgb_to_lab(const float *rgb, size_t count, float *lab);

// Converts `count` `[L, a, b]` triples to sRGB, clamped into `[0, 1]`.
//
// # Safety
// `lab` and `rgb` must each point to `3 * count` floats.
enum DcStatus dc_lab_to_rgb(const float *lab, size_t count, float *rgb);

// Colorfulness score of an `height x width` RGB image in `[0, 1]`.
//
// # Safety
// `rgb` must point to `3 * height * width` floats; `out` to one double.
enum DcStatus dc_colorfulness(const float *rgb, size_t height, size_t width, double *out);

// PSNR in dB between two signals of `len` values; identical inputs give
// the documented cap.
//
// # Safety
// `pred` and `target` must point to `len` doubles; `out` to one double.
enum DcStatus dc_psnr(const double *pred,
                      const double *target,
                      size_t len,
                      double peak,
                      double *out);

// Fréchet distance between two Gaussians given as means of length `dim`
// and row-major `dim x dim` covariances.
//
// # Safety
// Means must point to `dim` doubles, covariances to `dim * dim` doubles
// and `out` to one double.
enum DcStatus dc_frechet_distance(const double *mean_a,
                                  const double *cov_a,
                                  const double *mean_b,
                                  const double *cov_b,
                                  size_t dim,
                                  double *out);

// Loads a training checkpoint. On success `*model` owns a handle that
// must be released with [`dc_model_free`].
//
// # Safety
// `path` must be a nul-terminated string; `model` must be writable.
enum DcStatus dc_model_load(const char *path, struct DcModel **model);

// Number of color queries, or 0 when the model has no color decoder.
//
// # Safety
// `model` must come from [`dc_model_load`]; `out` must be writable.
enum DcStatus dc_model_num_queries(const struct DcModel *model, size_t *out);

// Colorizes an RGB image of any size, keeping its luminance. Color
// inputs are reduced to luminance first.
//
// # Safety
// `model` must come from [`dc_model_load`]; `rgb` and `out` must each
// point to `3 * height * width` floats.
enum DcStatus dc_model_colorize(const struct DcModel *model,
                                const float *rgb,
                                size_t height,
                                size_t width,
                                float *out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from [`dc_model_load`] and not be used afterwards.
void dc_model_free(struct DcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALCOLOR_H */
