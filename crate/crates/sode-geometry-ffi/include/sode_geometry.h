/* C interface to the sode-geometry library. */

#ifndef SODE_GEOMETRY_H
#define SODE_GEOMETRY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum sg_status {
  SG_OK = 0,
  SG_INVALID_ARGUMENT = 1,
  SG_PARSE_ERROR = 2,
  SG_EVAL_ERROR = 3,
  SG_UNSUPPORTED = 4,
  SG_PANIC = 5,
} sg_status;

/**
 * Opaque handle to a loaded system definition.
 */
typedef struct sg_system sg_system;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *sg_version(void);

/**
 * Copy the last error message for this thread into `buffer` (truncated to
 * `capacity` − 1 bytes, NUL terminated). Returns the full message length.
 *
 * # Safety
 * `buffer` must point to at least `capacity` writable bytes, or be null
 * (in which case only the length is returned).
 */
size_t sg_last_error(char *buffer, size_t capacity);

/**
 * Parse and validate a system definition document (the same JSON format
 * the CLI consumes). On success `*out_system` owns the loaded system.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out_system` a valid pointer.
 */
enum sg_status sg_system_load_json(const char *json, struct sg_system **out_system);

/**
 * Release a system handle. Null is ignored.
 *
 * # Safety
 * `system` must have come from `sg_system_load_json` and not been freed.
 */
void sg_system_free(struct sg_system *system);

/**
 * Evaluate tensors at the file's points (or `npoints` sampled ones) and
 * return the report JSON. `tensors` may be null for "everything" or a
 * comma-separated subset (gamma,phi,k,curvature,torsion,connection,shape,
 * chetaev). With `use_file_seed` nonzero the file's seed is used and
 * `seed` is ignored.
 *
 * # Safety
 * Pointers must be valid; the returned string is freed via
 * `sg_string_free`.
 */
enum sg_status sg_inspect_json(const struct sg_system *system,
                               const char *tensors,
                               uint32_t order,
                               uint32_t npoints,
                               uint64_t seed,
                               int32_t use_file_seed,
                               char **out_json);

/**
 * Run the invariant suites; the JSON carries the per-identity residuals,
 * the tolerance and the pass flag.
 *
 * # Safety
 * As for `sg_inspect_json`.
 */
enum sg_status sg_verify_json(const struct sg_system *system,
                              uint32_t npoints,
                              double tol,
                              uint64_t seed,
                              int32_t use_file_seed,
                              char **out_json);

/**
 * Reduce a nonholonomic system at the file's points (or sampled ones).
 *
 * # Safety
 * As for `sg_inspect_json`.
 */
enum sg_status sg_reduce_json(const struct sg_system *system,
                              uint32_t npoints,
                              uint64_t seed,
                              int32_t use_file_seed,
                              char **out_json);

/**
 * Eigencondition polynomial and real roots per point.
 *
 * # Safety
 * As for `sg_inspect_json`.
 */
enum sg_status sg_roots_json(const struct sg_system *system,
                             uint32_t npoints,
                             uint64_t seed,
                             int32_t use_file_seed,
                             char **out_json);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must have come from this library and not been freed already.
 */
void sg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SODE_GEOMETRY_H */
