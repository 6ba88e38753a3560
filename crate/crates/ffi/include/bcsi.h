#ifndef BCSI_H
#define BCSI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BcsiStatus {
  BCSI_STATUS_OK = 0,
  BCSI_STATUS_NULL_POINTER = 1,
  BCSI_STATUS_INVALID_ARGUMENT = 2,
  BCSI_STATUS_SHAPE = 3,
  BCSI_STATUS_CONFIG = 4,
  BCSI_STATUS_IO = 5,
  BCSI_STATUS_FORMAT = 6,
  BCSI_STATUS_NUMERICAL = 7,
  BCSI_STATUS_PANIC = 8,
} BcsiStatus;

/**
 * A trained network ready for full-volume inference.
 */
typedef struct BcsiModel BcsiModel;

/**
 * Dense `D×H×W` volume of doubles, row-major with `W` fastest.
 */
typedef struct BcsiVolume BcsiVolume;

/**
 * Dice and Jaccard in percent, distances in voxels. When either mask is
 * empty `has_distances` is 0 and both distances are NaN.
 */
typedef struct BcsiMetrics {
  double dice;
  double jaccard;
  double hd95;
  double asd;
  int32_t has_distances;
} BcsiMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *bcsi_last_error(void);

/**
 * NUL-terminated library version.
 */
const char *bcsi_version(void);

/**
 * Copies `d·h·w` doubles from `data` into a new volume.
 *
 * # Safety
 * `data` must point to `d·h·w` readable doubles; `out` must be writable.
 */
enum BcsiStatus bcsi_volume_new(size_t d,
                                size_t h,
                                size_t w,
                                const double *data,
                                struct BcsiVolume **out);

/**
 * Writes the three extents of `v` into `dims`.
 *
 * # Safety
 * `v` must be a live volume handle and `dims` point to three writable sizes.
 */
enum BcsiStatus bcsi_volume_dims(const struct BcsiVolume *v, size_t *dims);

/**
 * Borrows the voxel buffer of `v`; valid until `v` is freed.
 *
 * # Safety
 * `v` must be a live volume handle; `data` and `len` must be writable.
 */
enum BcsiStatus bcsi_volume_data(const struct BcsiVolume *v, const double **data, size_t *len);

/**
 * Releases a volume; null is ignored.
 *
 * # Safety
 * `v` must be null or a handle not yet freed.
 */
void bcsi_volume_free(struct BcsiVolume *v);

/**
 * Generates one synthetic case. `params_json` holds generator parameters
 * (any subset of the keys; null for the defaults). The label volume holds
 * 0/1 values.
 *
 * # Safety
 * `params_json` must be null or NUL-terminated; `image` and `label` writable.
 */
enum BcsiStatus bcsi_generate_case(uint64_t seed,
                                   const char *params_json,
                                   struct BcsiVolume **image,
                                   struct BcsiVolume **label);

/**
 * Consistency-weight ramp `λ_u(t)`.
 */
double bcsi_lambda_u(size_t t, size_t t_max);

/**
 * Loads the network described by the JSON config at `config_path` with
 * weights from the training checkpoint at `checkpoint_path`.
 *
 * # Safety
 * Both paths must be NUL-terminated; `out` must be writable.
 */
enum BcsiStatus bcsi_model_load(const char *config_path,
                                const char *checkpoint_path,
                                struct BcsiModel **out);

/**
 * Foreground probabilities for `image`, same extents.
 *
 * # Safety
 * `model` and `image` must be live handles; `probs` writable.
 */
enum BcsiStatus bcsi_model_predict(const struct BcsiModel *model,
                                   const struct BcsiVolume *image,
                                   struct BcsiVolume **probs);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void bcsi_model_free(struct BcsiModel *m);

/**
 * Scores `pred > threshold` against the binary `gt` (`gt > 0.5`).
 *
 * # Safety
 * `pred` and `gt` must be live handles; `out` writable.
 */
enum BcsiStatus bcsi_case_metrics(const struct BcsiVolume *pred,
                                  const struct BcsiVolume *gt,
                                  double threshold,
                                  struct BcsiMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCSI_H */
