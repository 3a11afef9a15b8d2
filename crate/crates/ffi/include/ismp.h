#ifndef ISMP_H
#define ISMP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IsmpStatus {
  ISMP_STATUS_OK = 0,
  ISMP_STATUS_NULL_POINTER = 1,
  ISMP_STATUS_INVALID_ARGUMENT = 2,
  ISMP_STATUS_NUMERICAL = 3,
  ISMP_STATUS_CALIBRATION = 4,
  ISMP_STATUS_CONFIG = 5,
  ISMP_STATUS_IO = 6,
  ISMP_STATUS_BUFFER_TOO_SMALL = 7,
  ISMP_STATUS_PANIC = 8,
} IsmpStatus;

/**
 * Opaque simulated ensemble.
 */
typedef struct IsmpEnsemble IsmpEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *ismp_last_error_message(void);

const char *ismp_version(void);

/**
 * Simulates benchmark `benchmark` (1, 2 or 3) under the constant control
 * `control` and stores a new handle in `*out`.
 *
 * # Safety
 * `sigma` must point to `sigma_len` doubles and `out` must be writable.
 */
enum IsmpStatus ismp_simulate_benchmark(uint32_t benchmark,
                                        const double *sigma,
                                        size_t sigma_len,
                                        double x0,
                                        double horizon,
                                        size_t steps,
                                        size_t paths,
                                        double control,
                                        uint64_t seed,
                                        struct IsmpEnsemble **out);

/**
 * # Safety
 * `ensemble` must come from [`ismp_simulate_benchmark`]; the out pointers
 * must be writable.
 */
enum IsmpStatus ismp_ensemble_shape(const struct IsmpEnsemble *ensemble,
                                    size_t *paths,
                                    size_t *steps);

/**
 * Copies the `paths x (steps + 1)` state matrix, row-major by path, into
 * `buffer` of `len` doubles.
 *
 * # Safety
 * `buffer` must be writable for `len` doubles.
 */
enum IsmpStatus ismp_ensemble_copy_states(const struct IsmpEnsemble *ensemble,
                                          double *buffer,
                                          size_t len);

/**
 * Mean and standard error of the terminal Tanaka local time at `level`.
 *
 * # Safety
 * `ensemble` must be a live handle; `mean` and `se` must be writable.
 */
enum IsmpStatus ismp_local_time_mean(const struct IsmpEnsemble *ensemble,
                                     double level,
                                     double *mean,
                                     double *se);

/**
 * # Safety
 * `ensemble` must be null or a handle not yet freed.
 */
void ismp_ensemble_free(struct IsmpEnsemble *ensemble);

/**
 * Runs a config file; `*exit_code` receives 0 (pass) or 2 (verification
 * failure). Errors are reported through the status.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `exit_code` writable.
 */
enum IsmpStatus ismp_run_config(const char *config_path, int32_t *exit_code);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ISMP_H */
