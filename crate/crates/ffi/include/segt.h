#ifndef SEGT_H
#define SEGT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SEGT_FORMAT_BIN 0

#define SEGT_FORMAT_CSV 1

/**
 * Hilbert expansion in the given orientation.
 */
#define SEGT_STRATEGY_PLUS 0

/**
 * The conjugate orientation.
 */
#define SEGT_STRATEGY_MINUS 1

#define SEGT_INIT_RANDOM 0

/**
 * Residual branches start at zero, so the encoder passes features through.
 */
#define SEGT_INIT_IDENTITY 1

/**
 * Result of every fallible call.
 */
typedef enum {
  SEGT_STATUS_OK = 0,
  SEGT_STATUS_NULL_POINTER = 1,
  SEGT_STATUS_INVALID_ARGUMENT = 2,
  SEGT_STATUS_IO = 3,
  SEGT_STATUS_INGEST = 4,
  SEGT_STATUS_PARSE = 5,
  SEGT_STATUS_CONFIG = 6,
  SEGT_STATUS_DOMAIN = 7,
  SEGT_STATUS_SHAPE = 8,
  SEGT_STATUS_NON_FINITE = 9,
  SEGT_STATUS_FORMAT = 10,
  SEGT_STATUS_TRUNCATED = 11,
  SEGT_STATUS_PANIC = 12,
} SegtStatus;

/**
 * Dense bird's-eye-view grid, `[x][y][channel]`.
 */
typedef struct SegtBev SegtBev;

/**
 * Parsed run configuration.
 */
typedef struct SegtConfig SegtConfig;

/**
 * Encoder weights with the configuration they were built for.
 */
typedef struct SegtEncoder SegtEncoder;

/**
 * Serialization order of a voxel set.
 */
typedef struct SegtPlan SegtPlan;

/**
 * Sparse voxels: integer coordinates plus an `n x channels` feature matrix.
 */
typedef struct SegtVoxelSet SegtVoxelSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *segt_version(void);

/**
 * Message for the most recent failed call on this thread, or null if the
 * last status-returning call succeeded. Valid until the next such call on
 * this thread.
 */
const char *segt_last_error(void);

SegtStatus segt_config_default(SegtConfig **out);

/**
 * Parses `key = value` configuration text.
 */
SegtStatus segt_config_parse(const char *text, SegtConfig **out);

SegtStatus segt_config_load(const char *file, SegtConfig **out);

/**
 * Writes the canonical text form into `buf` (truncated to `cap - 1` bytes
 * plus a NUL) and its full length, excluding the NUL, into `*len`. Pass a
 * null `buf` with `cap == 0` to query the length.
 */
SegtStatus segt_config_to_text(const SegtConfig *cfg, char *buf, size_t cap, size_t *len);

void segt_config_free(SegtConfig *cfg);

/**
 * Voxelizes `n_points` interleaved records of `stride` doubles
 * (x, y, z, then `stride - 3` extras) on the configuration's grid.
 * `dropped`, if non-null, receives the number of points outside the grid.
 */
SegtStatus segt_voxelize_points(const SegtConfig *cfg,
                                const double *points,
                                size_t n_points,
                                size_t stride,
                                SegtVoxelSet **out,
                                size_t *dropped);

/**
 * Reads a point file (`SEGT_FORMAT_BIN` with the configuration's stride,
 * or `SEGT_FORMAT_CSV`) and voxelizes it.
 */
SegtStatus segt_voxelize_file(const SegtConfig *cfg,
                              const char *file,
                              uint32_t format,
                              SegtVoxelSet **out,
                              size_t *dropped);

/**
 * Builds a voxel set on the configuration's grid from `n` coordinate
 * triples and an `n x channels` row-major feature block. Coordinates must be
 * distinct and inside the grid.
 */
SegtStatus segt_voxelset_new(const SegtConfig *cfg,
                             const uint32_t *coords,
                             const double *features,
                             size_t n,
                             size_t channels,
                             SegtVoxelSet **out);

/**
 * Reads a `SEGV` voxel container.
 */
SegtStatus segt_voxelset_read(const char *file, SegtVoxelSet **out);

SegtStatus segt_voxelset_write(const SegtVoxelSet *voxels, const char *file);

/**
 * Number of voxels; 0 for a null handle.
 */
size_t segt_voxelset_len(const SegtVoxelSet *voxels);

size_t segt_voxelset_channels(const SegtVoxelSet *voxels);

/**
 * Grid extent in voxels, written to `dims[0..3]`.
 */
SegtStatus segt_voxelset_dims(const SegtVoxelSet *voxels, uint32_t *dims);

/**
 * `len * 3` coordinates, row-major. Borrowed from the handle.
 */
const uint32_t *segt_voxelset_coords(const SegtVoxelSet *voxels);

/**
 * `len * channels` features, row-major. Borrowed from the handle.
 */
const double *segt_voxelset_features(const SegtVoxelSet *voxels);

void segt_voxelset_free(SegtVoxelSet *voxels);

/**
 * Hilbert index of a `d`-dimensional point (`d` is 2 or 3) at `level` bits
 * per axis.
 */
SegtStatus segt_hilbert_encode(const uint32_t *coord, size_t d, uint32_t level, uint64_t *index);

/**
 * Inverse of `segt_hilbert_encode`; writes `d` coordinates to `coord`.
 */
SegtStatus segt_hilbert_decode(uint64_t index, uint32_t level, size_t d, uint32_t *coord);

/**
 * Orders `voxels` along the two-level curve picked by `strategy`, with the
 * expansion levels from `cfg`.
 */
SegtStatus segt_serialize(const SegtConfig *cfg,
                          const SegtVoxelSet *voxels,
                          uint32_t strategy_code,
                          SegtPlan **out);

size_t segt_plan_len(const SegtPlan *plan);

/**
 * `order[rank]` is the voxel row at that rank. Borrowed from the handle.
 */
const size_t *segt_plan_order(const SegtPlan *plan);

/**
 * `inverse[row]` is the rank of that voxel row. Borrowed from the handle.
 */
const size_t *segt_plan_inverse(const SegtPlan *plan);

/**
 * Copies the per-row global and local curve keys into two arrays of
 * `segt_plan_len` entries each. Either array may be null.
 */
SegtStatus segt_plan_keys(const SegtPlan *plan, uint64_t *global, uint64_t *local);

void segt_plan_free(SegtPlan *plan);

/**
 * Seeded weights for `cfg` (seed, width, heads, input channels and
 * precision all come from it).
 */
SegtStatus segt_encoder_new(const SegtConfig *cfg, uint32_t init, SegtEncoder **out);

/**
 * Reads a `SEGW` weights file.
 */
SegtStatus segt_encoder_load(const char *file, SegtEncoder **out);

SegtStatus segt_encoder_save(const SegtEncoder *encoder, const char *file);

/**
 * Channels the encoder expects on its input voxels.
 */
size_t segt_encoder_in_channels(const SegtEncoder *encoder);

size_t segt_encoder_channels(const SegtEncoder *encoder);

/**
 * Runs every layer over `voxels`; the result keeps the input's row order.
 */
SegtStatus segt_encoder_forward(const SegtEncoder *encoder,
                                const SegtVoxelSet *voxels,
                                SegtVoxelSet **out);

void segt_encoder_free(SegtEncoder *encoder);

/**
 * Sums features over z into a dense `nx x ny x channels` grid.
 */
SegtStatus segt_bev_scatter(const SegtVoxelSet *voxels, SegtBev **out);

/**
 * Writes `nx`, `ny` and `channels`; any of them may be null.
 */
SegtStatus segt_bev_shape(const SegtBev *bev, size_t *nx, size_t *ny, size_t *channels);

/**
 * `nx * ny * channels` values laid out `[x][y][channel]`. Borrowed from the
 * handle.
 */
const double *segt_bev_data(const SegtBev *bev);

/**
 * Writes a `SEGB` container.
 */
SegtStatus segt_bev_write(const SegtBev *bev, const char *file);

void segt_bev_free(SegtBev *bev);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGT_H */
