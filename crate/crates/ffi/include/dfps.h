#ifndef DFPS_H
#define DFPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every function.
 */
typedef enum DfpsStatus {
  DFPS_STATUS_OK = 0,
  DFPS_STATUS_NULL_ARGUMENT = 1,
  DFPS_STATUS_INVALID_UTF8 = 2,
  DFPS_STATUS_CONFIG = 3,
  DFPS_STATUS_IO = 4,
  DFPS_STATUS_NUMERICAL = 5,
  /**
   * The operation needs a trained or loaded model.
   */
  DFPS_STATUS_NOT_TRAINED = 6,
  DFPS_STATUS_INTERNAL = 7,
} DfpsStatus;

/**
 * Opaque solver handle.
 */
typedef struct DfpsSolver DfpsSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create a solver with the named profile (`"paper"` or `"smoke"`).
 *
 * # Safety
 * `profile` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DfpsStatus dfps_solver_new(const char *profile, struct DfpsSolver **out);

/**
 * Destroy a solver; null is ignored.
 *
 * # Safety
 * `h` must come from `dfps_solver_new` and not be used afterwards.
 */
void dfps_solver_free(struct DfpsSolver *h);

/**
 * Last error message for `h`, or the thread's last constructor error when
 * `h` is null. The pointer stays valid until the next call on the same
 * handle; returns null when there is no error.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
const char *dfps_last_error(const struct DfpsSolver *h);

/**
 * Overwrite config fields from a JSON object.
 *
 * # Safety
 * `h` must be a live handle and `json` a NUL-terminated string.
 */
enum DfpsStatus dfps_solver_configure(struct DfpsSolver *h, const char *json);

/**
 * # Safety
 * `h` must be a live handle.
 */
enum DfpsStatus dfps_solver_set_seed(struct DfpsSolver *h, uint64_t seed);

/**
 * Train on the configured scenario pool and evaluate.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum DfpsStatus dfps_solver_train(struct DfpsSolver *h);

/**
 * Evaluate the current model on the configured evaluation scenarios and
 * write the mean follower and leader costs.
 *
 * # Safety
 * `h` must be a live handle; `j1` and `j2` valid pointers.
 */
enum DfpsStatus dfps_solver_costs(struct DfpsSolver *h, double *j1, double *j2);

/**
 * Save the model as `<dir>/<stem>.bin` plus `<dir>/<stem>.json`.
 *
 * # Safety
 * `h` must be a live handle; `dir` and `stem` NUL-terminated strings.
 */
enum DfpsStatus dfps_solver_save(struct DfpsSolver *h, const char *dir, const char *stem);

/**
 * Load a model from a checkpoint manifest; the config dimensions follow it.
 *
 * # Safety
 * `h` must be a live handle and `manifest` a NUL-terminated string.
 */
enum DfpsStatus dfps_solver_load(struct DfpsSolver *h, const char *manifest);

/**
 * Trainable parameter count of the networks for the given dimensions;
 * 0 for invalid dimensions.
 */
uint64_t dfps_parameter_count(uintptr_t n, uintptr_t m1, uintptr_t m2);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dfps_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DFPS_H */
