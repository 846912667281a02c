#ifndef DIEROLL_H
#define DIEROLL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_POINTER = 1,
  DR_STATUS_INVALID_ARGUMENT = 2,
  DR_STATUS_IO = 3,
  DR_STATUS_CONFIG_INVALID = 4,
  /**
   * An adversary strategy tried to act on information outside its
   * causal past.
   */
  DR_STATUS_CAUSALITY = 5,
  /**
   * The analysis could not be carried out, e.g. enumeration too large.
   */
  DR_STATUS_ANALYSIS = 6,
  DR_STATUS_BUFFER_TOO_SMALL = 7,
  DR_STATUS_PANIC = 8,
} DrStatus;

/**
 * Loaded scenario. Opaque to C.
 */
typedef struct DrScenario DrScenario;

/**
 * Summary of one instance's outcome distribution.
 */
typedef struct DrVerdict {
  /**
   * Runs (Monte Carlo) that reached an outcome; 0 for exact results.
   */
  uint64_t trials;
  double abort_rate;
  double max_deviation;
  double variational_distance;
  /**
   * 1 if the security bound holds, 0 otherwise.
   */
  uint8_t pass;
} DrVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *dr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dr_version(void);

/**
 * Loads a TOML scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrStatus dr_scenario_load(const char *path, struct DrScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum DrStatus dr_scenario_parse(const char *toml, struct DrScenario **out);

/**
 * Releases a scenario. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void dr_scenario_free(struct DrScenario *s);

/**
 * Parties `M`, outcomes `N`, modulus `n` and parallel instances.
 *
 * # Safety
 * `s` must be a live handle; each out pointer may be null to skip it.
 */
enum DrStatus dr_scenario_shape(const struct DrScenario *s,
                                size_t *parties,
                                size_t *outcomes,
                                size_t *n,
                                size_t *instances);

/**
 * Security parameter `δ`, partition tolerance `α`, and the ideal
 * distribution (`outcomes` values).
 *
 * # Safety
 * `s` must be a live handle; `ideal` must hold `cap` doubles.
 */
enum DrStatus dr_scenario_bound(const struct DrScenario *s,
                                double *delta,
                                double *alpha,
                                double *ideal,
                                size_t cap);

/**
 * Monte Carlo estimate for one instance. `workers = 0` uses every core;
 * results do not depend on it. `probs` receives the `outcomes` empirical
 * frequencies.
 *
 * # Safety
 * `s` must be a live handle; `probs` must hold `cap` doubles and `out` be
 * writable.
 */
enum DrStatus dr_monte_carlo(const struct DrScenario *s,
                             size_t instance,
                             uint64_t trials,
                             uint64_t seed,
                             size_t workers,
                             double *probs,
                             size_t cap,
                             struct DrVerdict *out);

/**
 * Exact outcome distribution of one instance by enumeration, refused with
 * [`DrStatus::Analysis`] beyond `limit` input combinations (0 uses the
 * scenario's limit).
 *
 * # Safety
 * As for [`dr_monte_carlo`].
 */
enum DrStatus dr_exact(const struct DrScenario *s,
                       size_t instance,
                       uint64_t limit,
                       double *probs,
                       size_t cap,
                       struct DrVerdict *out);

/**
 * Splits `ℤ_n` into classes for the distribution `probs[0..outcomes]`.
 * Writes the class sizes and the realized tolerance `α`.
 *
 * # Safety
 * `probs` must hold `outcomes` doubles, `sizes` `cap` values, `alpha` be
 * writable.
 */
enum DrStatus dr_build_partition(const double *probs,
                                 size_t outcomes,
                                 size_t n,
                                 size_t *sizes,
                                 size_t cap,
                                 double *alpha);

/**
 * Bias of the XOR of the first `rounds` of `len` independent bits, bit
 * `i` being 0 with probability `1/2 + biases[i]`.
 *
 * # Safety
 * `biases` must hold `len` doubles; `out` must be writable.
 */
enum DrStatus dr_pile_up(const double *biases, size_t len, size_t rounds, double *out);

/**
 * Checks a layout of `m` balls: `centers` holds `3m` coordinates. Returns
 * [`DrStatus::ConfigInvalid`] listing every violated constraint.
 *
 * # Safety
 * Arrays must hold the stated number of doubles.
 */
enum DrStatus dr_validate_layout(const double *centers,
                                 const double *radii,
                                 const double *deadlines,
                                 size_t m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIEROLL_H */
