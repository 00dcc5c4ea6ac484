#ifndef DSAC_H
#define DSAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsacStatus {
  DSAC_STATUS_OK = 0,
  DSAC_STATUS_NULL_POINTER = 1,
  DSAC_STATUS_INVALID_ARGUMENT = 2,
  // Estimation failed, e.g. no minimal set produced a hypothesis.
  DSAC_STATUS_NUMERICAL = 3,
  DSAC_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  DSAC_STATUS_INTERNAL = 5,
} DsacStatus;

typedef enum DsacMode {
  // 3D-3D: camera-frame points from a depth sensor, threshold in meters.
  DSAC_MODE_RGBD = 0,
  // 2D-3D: pixels with known intrinsics, threshold in pixels.
  DSAC_MODE_RGB = 1,
} DsacMode;

// Estimator settings; opaque to C.
typedef struct DsacEstimator DsacEstimator;

// Trained regressor; opaque to C.
typedef struct DsacRegressor DsacRegressor;

// Camera-to-scene transform `y = R e + t`, `R` row-major.
typedef struct DsacPose {
  double rotation[9];
  double translation[3];
} DsacPose;

typedef struct DsacIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} DsacIntrinsics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *dsac_last_error(void);

// Library version as a static NUL-terminated string.
const char *dsac_version(void);

// Creates an estimator with `hypotheses` hypotheses and inlier threshold
// `threshold` (meters for RGB-D, pixels for RGB). A non-positive threshold
// selects the mode default.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum DsacStatus dsac_estimator_new(enum DsacMode mode,
                                   uint32_t hypotheses,
                                   double threshold,
                                   struct DsacEstimator **out);

// # Safety
// `est` must be null or a handle from [`dsac_estimator_new`] not yet freed.
void dsac_estimator_free(struct DsacEstimator *est);

// Robust pose from `n` camera-frame points and their scene coordinates.
// `out_inliers` may be null.
//
// # Safety
// `camera_points` and `scene_coords` must each hold `3 n` doubles; `est`
// must be a live RGB-D estimator handle.
enum DsacStatus dsac_estimate_rgbd(const struct DsacEstimator *est,
                                   const double *camera_points,
                                   const double *scene_coords,
                                   size_t n,
                                   uint64_t seed,
                                   struct DsacPose *out_pose,
                                   size_t *out_inliers);

// Robust pose from `n` pixels and their scene coordinates.
// `out_inliers` may be null.
//
// # Safety
// `pixels` must hold `2 n` doubles and `scene_coords` `3 n`; `est` must be
// a live RGB estimator handle.
enum DsacStatus dsac_estimate_rgb(const struct DsacEstimator *est,
                                  struct DsacIntrinsics intrinsics,
                                  const double *pixels,
                                  const double *scene_coords,
                                  size_t n,
                                  uint64_t seed,
                                  struct DsacPose *out_pose,
                                  size_t *out_inliers);

// Loads a regressor from a training checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum DsacStatus dsac_regressor_load(const char *path, struct DsacRegressor **out);

// # Safety
// `reg` must be null or a handle from [`dsac_regressor_load`] not yet freed.
void dsac_regressor_free(struct DsacRegressor *reg);

// Descriptor length the regressor expects, or 0 for a null handle.
//
// # Safety
// `reg` must be null or a live handle.
size_t dsac_regressor_input_dim(const struct DsacRegressor *reg);

// Predicts scene coordinates for `n` pixels.
//
// # Safety
// `features` must hold `n * input_dim` doubles and `out_coords` room for
// `3 n`.
enum DsacStatus dsac_regressor_predict(const struct DsacRegressor *reg,
                                       const double *features,
                                       size_t n,
                                       double *out_coords);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSAC_H */
