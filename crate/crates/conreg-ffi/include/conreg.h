#ifndef CONREG_H
#define CONREG_H

/* This file is generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum ConregStatus {
  CONREG_STATUS_OK = 0,
  /**
   * invalid argument or malformed input data
   */
  CONREG_STATUS_VALIDATION = 1,
  /**
   * a point left the mathematical domain of an operation
   */
  CONREG_STATUS_DOMAIN = 2,
  /**
   * a candidate warp failed the diffeomorphism checks
   */
  CONREG_STATUS_DIFFEOMORPHISM = 3,
  /**
   * resource limit exceeded
   */
  CONREG_STATUS_RESOURCE = 4,
  /**
   * an iteration failed to converge
   */
  CONREG_STATUS_CONVERGENCE = 5,
  /**
   * file system failure
   */
  CONREG_STATUS_IO = 6,
  /**
   * unreadable file contents
   */
  CONREG_STATUS_PARSE = 7,
  /**
   * a null pointer was passed where an object is required
   */
  CONREG_STATUS_NULL_POINTER = 8,
  /**
   * an internal invariant was violated
   */
  CONREG_STATUS_PANIC = 9,
} ConregStatus;

/**
 * A density on the unit square (opaque).
 */
typedef struct ConregDensity ConregDensity;

/**
 * A boundary-preserving reparameterization of the unit interval (opaque).
 */
typedef struct ConregWarp ConregWarp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *conreg_last_error_message(void);

/**
 * Builds a density from an `n`×`n` row-major table of non-negative
 * values on the uniform grid; the table is copied and normalized to
 * unit mass.
 */
enum ConregStatus conreg_density_from_values(size_t n,
                                             const double *values,
                                             struct ConregDensity **out);

/**
 * Reads a density from a CSV file with its JSON sidecar.
 */
enum ConregStatus conreg_density_read(const char *path, struct ConregDensity **out);

/**
 * Writes a density as CSV plus a JSON sidecar.
 */
enum ConregStatus conreg_density_write(const struct ConregDensity *density, const char *path);

/**
 * Grid size of a density (the value table is size×size).
 */
size_t conreg_density_size(const struct ConregDensity *density);

/**
 * Copies the row-major value table into `out`, which must hold
 * size×size doubles.
 */
enum ConregStatus conreg_density_values(const struct ConregDensity *density, double *out);

void conreg_density_free(struct ConregDensity *density);

/**
 * Reads a warp from its two-column CSV form.
 */
enum ConregStatus conreg_warp_read(const char *path, struct ConregWarp **out);

enum ConregStatus conreg_warp_write(const struct ConregWarp *warp, const char *path);

/**
 * Number of grid samples of a warp.
 */
size_t conreg_warp_size(const struct ConregWarp *warp);

/**
 * Copies the warp's values on its grid into `out` (size doubles).
 */
enum ConregStatus conreg_warp_values(const struct ConregWarp *warp, double *out);

/**
 * Inverse of a warp.
 */
enum ConregStatus conreg_warp_invert(const struct ConregWarp *warp, struct ConregWarp **out);

/**
 * L² distance between two warps on the same grid.
 */
enum ConregStatus conreg_warp_distance(const struct ConregWarp *a,
                                       const struct ConregWarp *b,
                                       double *out);

void conreg_warp_free(struct ConregWarp *warp);

/**
 * Registers `moving` onto `fixed`: finds the warp γ minimizing the
 * square-root-density distance ‖q_fixed − (q_moving, γ)‖. Passing 0 for
 * `basis_size` or `max_iters` selects the defaults. On success `*out`
 * holds the estimated warp and `*final_cost` (if non-null) the attained
 * cost.
 */
enum ConregStatus conreg_register(const struct ConregDensity *fixed,
                                  const struct ConregDensity *moving,
                                  size_t basis_size,
                                  size_t max_iters,
                                  struct ConregWarp **out,
                                  double *final_cost);

/**
 * Builds a centered template from `count` densities on a common grid.
 * On success `*out_template` holds the template density; when
 * `out_warps` is non-null it must point at `count` slots which receive
 * the per-subject alignment warps.
 */
enum ConregStatus conreg_template(const struct ConregDensity *const *densities,
                                  size_t count,
                                  struct ConregDensity **out_template,
                                  struct ConregWarp **out_warps);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CONREG_H */
