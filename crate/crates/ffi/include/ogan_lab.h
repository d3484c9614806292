#ifndef OGAN_LAB_H
#define OGAN_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OganStatus {
  OGAN_STATUS_OK = 0,
  OGAN_STATUS_NULL_POINTER = 1,
  OGAN_STATUS_INVALID_ARGUMENT = 2,
  OGAN_STATUS_IO = 3,
  OGAN_STATUS_FORMAT = 4,
  OGAN_STATUS_NON_FINITE = 5,
  OGAN_STATUS_PANIC = 6,
} OganStatus;

/**
 * A loaded perturbation generator.
 */
typedef struct OganGenerator OganGenerator;

/**
 * A loaded face-swap model.
 */
typedef struct OganSwapModel OganSwapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ogan_last_error(void);

/**
 * Loads a model checkpoint given its stem (without `.json`/`.bin`).
 *
 * # Safety
 * `stem` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OganStatus ogan_swap_model_load(const char *stem, struct OganSwapModel **out);

/**
 * # Safety
 * `model` must come from [`ogan_swap_model_load`] and not be used after.
 */
void ogan_swap_model_free(struct OganSwapModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum OganStatus ogan_swap_model_resolution(const struct OganSwapModel *model, size_t *out);

/**
 * The deepfake H(x) of `n` frames into `out` (same size as `frames`).
 *
 * # Safety
 * `frames` and `out` must hold n×R×R×3 floats.
 */
enum OganStatus ogan_swap_model_swap(const struct OganSwapModel *model,
                                     const float *frames,
                                     size_t n,
                                     float *out);

/**
 * # Safety
 * `stem` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OganStatus ogan_generator_load(const char *stem, struct OganGenerator **out);

/**
 * # Safety
 * `generator` must come from [`ogan_generator_load`] and not be used after.
 */
void ogan_generator_free(struct OganGenerator *generator);

/**
 * G(x, N) for `n` frames; `distortions` holds (theta, shift_x, shift_y)
 * per frame.
 *
 * # Safety
 * `frames` and `out` must hold n×R×R×3 floats, `distortions` 3n floats.
 */
enum OganStatus ogan_generator_perturb(const struct OganGenerator *generator,
                                       const float *frames,
                                       size_t n,
                                       const float *distortions,
                                       float *out);

/**
 * PGD distorting attack against `model`, one ε-bounded result per frame.
 *
 * # Safety
 * `frames` and `out` must hold n×R×R×3 floats.
 */
enum OganStatus ogan_pgd_distort(const struct OganSwapModel *model,
                                 const float *frames,
                                 size_t n,
                                 float epsilon,
                                 float alpha,
                                 size_t iterations,
                                 uint64_t seed,
                                 float *out);

/**
 * E_tmp of `n_frames` consecutive frames of `frame_len` floats each.
 *
 * # Safety
 * `frames` must hold n_frames×frame_len floats; `out` must be valid.
 */
enum OganStatus ogan_e_tmp(const float *frames, size_t n_frames, size_t frame_len, double *out);

/**
 * S_tmp of an attacked sequence against its baseline; both hold
 * n_frames×frame_len floats.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum OganStatus ogan_s_tmp(const float *attacked,
                           const float *baseline,
                           size_t n_frames,
                           size_t frame_len,
                           double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* OGAN_LAB_H */
