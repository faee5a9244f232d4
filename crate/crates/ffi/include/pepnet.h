#ifndef PEPNET_H
#define PEPNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every exported function.
typedef enum PepStatus {
  PEP_STATUS_OK = 0,
  PEP_STATUS_NULL_POINTER = 1,
  PEP_STATUS_INVALID_ARGUMENT = 2,
  PEP_STATUS_SHAPE = 3,
  PEP_STATUS_IO = 4,
  PEP_STATUS_FORMAT = 5,
  PEP_STATUS_NUMERIC = 6,
  PEP_STATUS_INTERNAL = 7,
} PepStatus;

// Opaque handle to a loaded model.
typedef struct PepModel PepModel;

// Synthetic generator settings, mirroring `pepnet generate-data`.
typedef struct PepSynthParams {
  size_t image_size;
  size_t num_raters;
  double p_absent;
  uint32_t jitter;
  double noise_sigma;
  uint64_t seed;
} PepSynthParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next call on the same thread.
const char *pep_last_error(void);

// Loads a checkpoint directory written by `pepnet train`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out_model` a writable pointer.
enum PepStatus pep_model_load(const char *dir, struct PepModel **out_model);

// Releases a handle from [`pep_model_load`]. NULL is ignored.
//
// # Safety
// `model` must come from `pep_model_load` and not be used afterwards.
void pep_model_free(struct PepModel *model);

// Image side length, full latent dimension and retained dimension.
//
// # Safety
// `model` must be a live handle; outputs must be writable.
enum PepStatus pep_model_dims(const struct PepModel *model,
                              size_t *image_size,
                              size_t *latent_dim,
                              size_t *k);

// Draws `m` foreground-probability maps for one `size × size` image in
// `[0, 1]`, writing `m · size · size` floats to `probs_out`. Identical
// inputs and seed give identical maps.
//
// # Safety
// `image` must hold `size²` floats and `probs_out` room for `m · size²`.
enum PepStatus pep_model_sample(const struct PepModel *model,
                                const float *image,
                                size_t size,
                                size_t m,
                                uint64_t seed,
                                float *probs_out);

// Intersection over union of two masks; two empty masks score 1.
//
// # Safety
// `a` and `b` must each hold `height · width` bytes; `out_iou` writable.
enum PepStatus pep_iou(const uint8_t *a,
                       const uint8_t *b,
                       size_t height,
                       size_t width,
                       double *out_iou);

// Generalized energy distance between `m` predicted masks and `r` rater
// masks, with distance `1 − IoU`.
//
// # Safety
// `preds` must hold `m · height · width` bytes, `raters` `r · height · width`.
enum PepStatus pep_ged(const uint8_t *preds,
                       size_t m,
                       const uint8_t *raters,
                       size_t r,
                       size_t height,
                       size_t width,
                       double *out_ged);

// Library defaults for [`PepSynthParams`].
struct PepSynthParams pep_synth_default(void);

// Generates sample `index` of the dataset defined by `params`: the same
// image and masks `pepnet generate-data` writes at that index. Writes
// `size²` floats to `image_out` and `num_raters · size²` bytes (0 or 1)
// to `masks_out`.
//
// # Safety
// `params` must be readable; outputs must have the sizes above.
enum PepStatus pep_generate_sample(const struct PepSynthParams *params,
                                   uint64_t index,
                                   float *image_out,
                                   uint8_t *masks_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEPNET_H */
