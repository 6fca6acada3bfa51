#ifndef KINETIC_FFI_H
#define KINETIC_FFI_H

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum KcStatus {
  KC_STATUS_OK = 0,
  KC_STATUS_NULL_POINTER = 1,
  KC_STATUS_PARSE = 2,
  KC_STATUS_VALIDATION = 3,
  KC_STATUS_INVALID_ARGUMENT = 4,
  KC_STATUS_CAP_EXCEEDED = 5,
  KC_STATUS_NUMERICAL = 6,
  KC_STATUS_IO = 7,
  KC_STATUS_BUFFER_TOO_SMALL = 8,
  KC_STATUS_PANIC = 9,
} KcStatus;

/**
 * A kinetic solver bound to one model and interaction strength.
 */
typedef struct KcKinetic KcKinetic;

/**
 * A loaded and validated configuration.
 */
typedef struct KcModel KcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *kc_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t kc_last_error_message(char *buf, size_t len);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum KcStatus kc_model_from_toml(const char *toml, struct KcModel **out);

/**
 * Loads and validates a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KcStatus kc_model_from_file(const char *path, struct KcModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `kc_model_from_*` not yet freed.
 */
void kc_model_free(struct KcModel *model);

/**
 * Number of entity states; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kc_model_n_states(const struct KcModel *model);

/**
 * Environment truncation `n_max`; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kc_model_n_max(const struct KcModel *model);

/**
 * Max deviation between the cumulant partition sum and the semigroup on
 * sector `1+s` with `n` singled-out slots. `dual` selects the generator
 * acting on distributions.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum KcStatus kc_cluster_residual(const struct KcModel *model,
                                  bool dual,
                                  double t,
                                  size_t s,
                                  size_t n,
                                  double *out);

/**
 * Monte Carlo estimate of the mean of the additive observable
 * `o10(tracer) + sum_i o01(x_i)` at time `t`.
 *
 * # Safety
 * `model` must be a live handle; `o10`, `o01` must hold `len` values; the
 * outputs must be writable.
 */
enum KcStatus kc_mc_mean_additive(const struct KcModel *model,
                                  const double *o10,
                                  const double *o01,
                                  size_t len,
                                  double t,
                                  size_t n_traj,
                                  uint64_t seed,
                                  double *mean,
                                  double *stderr);

/**
 * Builds a kinetic solver for `model` with interaction strength `eps`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum KcStatus kc_kinetic_new(const struct KcModel *model, double eps, struct KcKinetic **out);

/**
 * # Safety
 * `kinetic` must be null or a handle from `kc_kinetic_new` not yet freed.
 */
void kc_kinetic_free(struct KcKinetic *kinetic);

/**
 * Tracer distribution at `t` from the order-`order` series.
 *
 * # Safety
 * `kinetic` must be a live handle; `out` must hold `len` values.
 */
enum KcStatus kc_kinetic_tracer_distribution(const struct KcKinetic *kinetic,
                                             double t,
                                             size_t order,
                                             double *out,
                                             size_t len);

/**
 * Integrates the kinetic equation from the initial tracer marginal to
 * `t_max` and writes the endpoint.
 *
 * # Safety
 * `kinetic` must be a live handle; `out` must hold `len` values.
 */
enum KcStatus kc_kinetic_integrate(const struct KcKinetic *kinetic,
                                   double t_max,
                                   double dt,
                                   size_t order,
                                   double *out,
                                   size_t len);

/**
 * Both sides of the duality identity for the additive observable at `t`.
 *
 * # Safety
 * `kinetic` and `model` must be live handles (the solver built from this
 * model); `o10`, `o01` must hold `len` values; the outputs must be writable.
 */
enum KcStatus kc_kinetic_duality_additive(const struct KcKinetic *kinetic,
                                          const struct KcModel *model,
                                          const double *o10,
                                          const double *o01,
                                          size_t len,
                                          double t,
                                          size_t order,
                                          double *lhs,
                                          double *rhs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KINETIC_FFI_H */
