#ifndef MULTIPOSE_H
#define MULTIPOSE_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MpStatus {
  MP_STATUS_OK = 0,
  // A required pointer argument was null.
  MP_STATUS_NULL_ARGUMENT = 1,
  // A file could not be read or written.
  MP_STATUS_IO = 2,
  // Inputs failed validation (bad prompt, pose file, shapes, sizes).
  MP_STATUS_INVALID = 3,
  // Non-finite values or divergence.
  MP_STATUS_NUMERIC = 4,
  // A string argument was not valid UTF-8.
  MP_STATUS_UTF8 = 5,
  // An internal invariant failed; the library state is unchanged.
  MP_STATUS_INTERNAL = 6,
} MpStatus;

// Loaded or freshly initialized denoiser weights.
typedef struct MpModel MpModel;

// A dense `f32` tensor produced by the library (frames or masks).
typedef struct MpTensor MpTensor;

// Generation switches; obtain defaults from [`mp_generate_options_default`].
typedef struct MpGenerateOptions {
  uint64_t seed;
  uint32_t steps;
  // Non-zero enables region-masked cross-attention.
  uint8_t spatial_attn;
  // Non-zero merges all control branches into one.
  uint8_t single_branch;
  // Non-zero masks every control branch, including the first.
  uint8_t fusion_all_masked;
  // Region-mask softmax sharpness, at least 1.
  float mask_sharpness;
} MpGenerateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *mp_last_error(void);

// Library version as a static NUL-terminated string.
const char *mp_version(void);

// Load weights from a weights file.
//
// # Safety
// `path` is a NUL-terminated string; `out` points to writable storage.
enum MpStatus mp_model_load(const char *path, struct MpModel **out);

// Seeded untrained model; `tiny` selects the small test architecture.
//
// # Safety
// `out` points to writable storage.
enum MpStatus mp_model_init(uint64_t seed, bool tiny, struct MpModel **out);

// Write a model's weights file.
//
// # Safety
// `model` is a live handle; `path` is a NUL-terminated string.
enum MpStatus mp_model_save(const struct MpModel *model, const char *path);

// Total number of scalar parameters.
//
// # Safety
// `model` is null or a live handle.
size_t mp_model_parameter_count(const struct MpModel *model);

// # Safety
// `model` is null or a handle from this library not yet freed.
void mp_model_free(struct MpModel *model);

// Default generation options: full method, 50 steps, seed 0.
//
// # Safety
// `out` points to writable storage.
enum MpStatus mp_generate_options_default(struct MpGenerateOptions *out);

// Generate `[frames, 3, height, width]` pixels in `[0, 1]`.
//
// # Safety
// `model` is a live handle, `prompt` and `poses_json` are NUL-terminated
// strings, `options` is null (defaults) or valid, `out` is writable.
enum MpStatus mp_generate(const struct MpModel *model,
                          const char *prompt,
                          const char *poses_json,
                          const struct MpGenerateOptions *options,
                          struct MpTensor **out);

// Normalized full-resolution region masks `[characters, frames, h, w]`.
//
// # Safety
// `poses_json` is a NUL-terminated string and `out` is writable.
enum MpStatus mp_region_masks(const char *poses_json, float sharpness, struct MpTensor **out);

// Number of dimensions; 0 for a null handle.
//
// # Safety
// `t` is null or a live handle.
size_t mp_tensor_ndim(const struct MpTensor *t);

// Copy up to `cap` extents into `dims`; returns the number of dimensions.
//
// # Safety
// `t` is a live handle; `dims` has room for `cap` values.
enum MpStatus mp_tensor_dims(const struct MpTensor *t, size_t *dims, size_t cap);

// Number of elements; 0 for a null handle.
//
// # Safety
// `t` is null or a live handle.
size_t mp_tensor_len(const struct MpTensor *t);

// Copy all elements in row-major order; `cap` must be at least the length.
//
// # Safety
// `t` is a live handle; `dst` has room for `cap` floats.
enum MpStatus mp_tensor_copy(const struct MpTensor *t, float *dst, size_t cap);

// Write each frame of a `[frames, 3, h, w]` tensor as `frame_NNN.ppm` in `dir`.
//
// # Safety
// `t` is a live handle; `dir` is a NUL-terminated path to an existing directory.
enum MpStatus mp_tensor_write_frames(const struct MpTensor *t, const char *dir);

// # Safety
// `t` is null or a handle from this library not yet freed.
void mp_tensor_free(struct MpTensor *t);

// Split a tagged prompt into one prompt per character, joined by newlines.
// Free the result with [`mp_string_free`].
//
// # Safety
// `prompt` is a NUL-terminated string and `out` is writable.
enum MpStatus mp_split_prompt(const char *prompt, size_t characters, char **out);

// # Safety
// `s` is null or a string returned by this library not yet freed.
void mp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIPOSE_H */
