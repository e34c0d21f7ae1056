#ifndef BRAINSHIFT_H
#define BRAINSHIFT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_INVALID_ARGUMENT = 2,
  BS_STATUS_IO = 3,
  BS_STATUS_FORMAT = 4,
  BS_STATUS_GEOMETRY = 5,
  BS_STATUS_OUTSIDE_SUPPORT = 6,
  BS_STATUS_CHECKPOINT_SHAPE = 7,
  BS_STATUS_CHECKPOINT_FORMAT = 8,
  BS_STATUS_BUFFER_TOO_SMALL = 9,
  BS_STATUS_INTERNAL = 10,
} BsStatus;

/*
 B-spline control lattice handle.
 */
typedef struct BsFfdGrid BsFfdGrid;

/*
 Network parameter handle.
 */
typedef struct BsModel BsModel;

/*
 Image volume handle.
 */
typedef struct BsVolume BsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next `bs_*` call on the same thread.
 */
const char *bs_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *bs_version(void);

/*
 Axis-aligned volume with `channels * dims[0] * dims[1] * dims[2]` values copied from `data`.

 # Safety
 `dims`, `spacing` and `origin` point to 3 values; `data` to the full payload.
 */
enum BsStatus bs_volume_new(const size_t *dims,
                            const double *spacing,
                            const double *origin,
                            size_t channels,
                            const double *data,
                            struct BsVolume **out);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum BsStatus bs_volume_read_nifti(const char *path, struct BsVolume **out);

/*
 # Safety
 `vol` is a live handle; `path` is a NUL-terminated string.
 */
enum BsStatus bs_volume_write_nifti(const struct BsVolume *vol, const char *path);

/*
 Writes the grid size to `dims[0..3]` and the channel count to `channels`.

 # Safety
 `vol` is a live handle; `dims` holds 3 values.
 */
enum BsStatus bs_volume_shape(const struct BsVolume *vol, size_t *dims, size_t *channels);

/*
 Copies the voxel data into `buf` (`len` values).

 # Safety
 `vol` is a live handle; `buf` holds `len` values.
 */
enum BsStatus bs_volume_copy_data(const struct BsVolume *vol, double *buf, size_t len);

/*
 # Safety
 `vol` is null or a handle not yet freed.
 */
void bs_volume_free(struct BsVolume *vol);

/*
 Signed distance of a binary mask, negative inside, clamped to `cap_mm`.

 # Safety
 `mask` is a live handle; `out` is writable.
 */
enum BsStatus bs_signed_distance(const struct BsVolume *mask, double cap_mm, struct BsVolume **out);

/*
 Backward warp of `vol` by the 3-channel field `disp`; thresholded at 0.5 when `is_mask` is nonzero.

 # Safety
 `vol` and `disp` are live handles; `out` is writable.
 */
enum BsStatus bs_warp(const struct BsVolume *vol,
                      const struct BsVolume *disp,
                      int32_t is_mask,
                      struct BsVolume **out);

/*
 Lattice with `cp_dims` control points; `displacements` holds xyz triples, x index fastest.

 # Safety
 `cp_dims`, `cp_spacing`, `cp_origin` point to 3 values; `displacements` to `3 * prod(cp_dims)`.
 */
enum BsStatus bs_ffd_new(const size_t *cp_dims,
                         const double *cp_spacing,
                         const double *cp_origin,
                         const double *displacements,
                         struct BsFfdGrid **out);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum BsStatus bs_ffd_read_cpp(const char *path, struct BsFfdGrid **out);

/*
 # Safety
 `grid` is a live handle; `path` is a NUL-terminated string.
 */
enum BsStatus bs_ffd_write_cpp(const struct BsFfdGrid *grid, const char *path);

/*
 Displacement `u(x)` in mm at world point `x`.

 # Safety
 `grid` is a live handle; `x` and `u` point to 3 values.
 */
enum BsStatus bs_ffd_displacement(const struct BsFfdGrid *grid, const double *x, double *u);

/*
 Dense 3-channel displacement on the grid of `reference`.

 # Safety
 `grid` and `reference` are live handles; `out` is writable.
 */
enum BsStatus bs_ffd_densify(const struct BsFfdGrid *grid,
                             const struct BsVolume *reference,
                             struct BsVolume **out);

/*
 # Safety
 `grid` is null or a handle not yet freed.
 */
void bs_ffd_free(struct BsFfdGrid *grid);

/*
 Freshly initialized network parameters.

 # Safety
 `out` is writable.
 */
enum BsStatus bs_model_init(uint64_t seed, struct BsModel **out);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum BsStatus bs_model_load(const char *path, struct BsModel **out);

/*
 # Safety
 `model` is a live handle; `path` is a NUL-terminated string.
 */
enum BsStatus bs_model_save(const struct BsModel *model, const char *path);

/*
 Runs the network on a standardized image and hemisphere indicator.
 Any of the three outputs may be null to skip it.

 # Safety
 `model`, `pmri` and `half_mask` are live handles; non-null outputs are writable.
 */
enum BsStatus bs_model_predict(const struct BsModel *model,
                               const struct BsVolume *pmri,
                               const struct BsVolume *half_mask,
                               struct BsVolume **out_disp,
                               struct BsVolume **out_mask,
                               struct BsVolume **out_sdf);

/*
 # Safety
 `model` is null or a handle not yet freed.
 */
void bs_model_free(struct BsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAINSHIFT_H */
