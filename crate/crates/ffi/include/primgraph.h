/* C interface to the primgraph primitive-based 3D estimation pipeline. */

#ifndef PRIMGRAPH_H
#define PRIMGRAPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_INVALID_ARGUMENT = 1,
  PG_STATUS_IO_ERROR = 2,
  PG_STATUS_PARSE_ERROR = 3,
  PG_STATUS_RUNTIME_ERROR = 4,
} PgStatus;

// Opaque handle: a loaded checkpoint with its metadata and wiring.
typedef struct PgModel PgModel;

// Opaque handle: a set of labeled primitives.
typedef struct PgShape PgShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pg_version(void);

// Message of the calling thread's most recent error. The pointer stays
// valid until the next failing call on the same thread.
const char *pg_last_error(void);

// Loads a checkpoint (with its sidecar metadata) into a model handle.
//
// # Safety
// `ckpt_path` must be a valid NUL-terminated string and `out` a valid
// pointer; the returned handle must be released with [`pg_model_free`].
enum PgStatus pg_model_load(const char *ckpt_path, struct PgModel **out);

// Releases a model handle. A null pointer is a no-op.
//
// # Safety
// `model` must have come from [`pg_model_load`] and not be freed twice.
void pg_model_free(struct PgModel *model);

// Semantic class count M_c of the loaded model.
//
// # Safety
// `model` must be a live handle from [`pg_model_load`].
uint32_t pg_model_class_count(const struct PgModel *model);

// Expected square input image side of the loaded model.
//
// # Safety
// `model` must be a live handle from [`pg_model_load`].
uint32_t pg_model_image_size(const struct PgModel *model);

// Runs full-image inference on a row-major depth raster (32-bit floats,
// 0 = background) and returns the predicted shape. An all-background
// prediction yields an empty shape and `Ok`.
//
// # Safety
// `depth` must point to `width * height` readable floats; `model` and
// `out` must be valid. The shape must be released with [`pg_shape_free`].
enum PgStatus pg_model_predict_depth(const struct PgModel *model,
                                     const float *depth,
                                     uint32_t width,
                                     uint32_t height,
                                     struct PgShape **out);

// Builds a shape from `count` rows of 10 doubles each: a semantic label
// followed by the 9 box parameters (lengths, translation, Euler angles).
//
// # Safety
// `rows` must point to `count * 10` readable doubles; `out` must be valid.
enum PgStatus pg_shape_from_params(const double *rows, size_t count, struct PgShape **out);

// Number of primitives in a shape.
//
// # Safety
// `shape` must be a live handle.
size_t pg_shape_len(const struct PgShape *shape);

// Copies primitive `index` into `out10` as [label, 9 parameters].
//
// # Safety
// `shape` must be live and `out10` point to 10 writable doubles.
enum PgStatus pg_shape_primitive(const struct PgShape *shape, size_t index, double *out10);

// Releases a shape handle. A null pointer is a no-op.
//
// # Safety
// `shape` must have come from this library and not be freed twice.
void pg_shape_free(struct PgShape *shape);

// Rasterizes a shape onto the default [-0.5, 0.5]^3 extent at the given
// resolution, writing `resolution^3` occupancy bytes (0/1, row-major over
// x, y, z).
//
// # Safety
// `out_occupancy` must point to `resolution^3` writable bytes.
enum PgStatus pg_shape_voxelize(const struct PgShape *shape,
                                uint32_t resolution,
                                uint8_t *out_occupancy);

// Voxel IoU (percent) of two shapes on the default extent.
//
// # Safety
// All pointers must be valid; `out` receives the percentage.
enum PgStatus pg_shape_iou(const struct PgShape *a,
                           const struct PgShape *b,
                           uint32_t resolution,
                           double *out);

// Symmetric Hausdorff error of one shape pair:
// `(D(a, b) + D(b, a)) / 2` over corner-set distances.
//
// # Safety
// All pointers must be valid; `out` receives the distance.
enum PgStatus pg_shape_herr(const struct PgShape *a, const struct PgShape *b, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PRIMGRAPH_H */
