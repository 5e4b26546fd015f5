#ifndef PUBSEL_H
#define PUBSEL_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum PubselStatus {
  PUBSEL_STATUS_OK = 0,
  // A required pointer argument was null.
  PUBSEL_STATUS_NULL_POINTER = 1,
  // Arguments or data were invalid.
  PUBSEL_STATUS_INVALID_INPUT = 2,
  // A numerical routine failed.
  PUBSEL_STATUS_NUMERICAL = 3,
  // A string argument was not valid UTF-8.
  PUBSEL_STATUS_INVALID_UTF8 = 4,
  // Internal panic; the library state is unaffected.
  PUBSEL_STATUS_PANIC = 5,
} PubselStatus;

// Distribution of true effects.
typedef struct PubselEffect PubselEffect;

// Fitted model read from a fit document.
typedef struct PubselFit PubselFit;

// Selection function p(z).
typedef struct PubselSelection PubselSelection;

// Median-unbiased estimate with interval bounds.
typedef struct PubselInterval {
  double median;
  double lower;
  double upper;
} PubselInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *pubsel_last_error(void);

// Library version as a static string.
const char *pubsel_version(void);

// Step selection function over z with increasing `cutoffs` (on |z| when
// `symmetric`) and one coefficient per cell. No cell is normalized.
//
// # Safety
// Array pointers must be valid for the given lengths; `out` must be writable.
enum PubselStatus pubsel_selection_new(const double *cutoffs,
                                       uintptr_t n_cutoffs,
                                       const double *coefficients,
                                       uintptr_t n_coefficients,
                                       bool symmetric,
                                       struct PubselSelection **out_handle);

// # Safety
// `handle` must come from this library or be null.
void pubsel_selection_free(struct PubselSelection *handle);

// p(z).
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_selection_value(const struct PubselSelection *p, double z, double *value);

// E[p(X/sigma) | theta] for X ~ N(theta, sigma^2).
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_expected_pub_prob(const struct PubselSelection *p,
                                           double theta,
                                           double sigma,
                                           double *value);

// CDF of a published estimate at `x` given `theta`.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_truncated_cdf(const struct PubselSelection *p,
                                       double x,
                                       double theta,
                                       double sigma,
                                       double *value);

// Median-unbiased estimate and equal-tailed `1 - alpha` interval under a known p.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_corrected_interval(const struct PubselSelection *p,
                                            double x,
                                            double sigma,
                                            double alpha,
                                            struct PubselInterval *result);

// Symmetric gamma on |theta| with random sign.
//
// # Safety
// `out_handle` must be writable.
enum PubselStatus pubsel_effect_gamma_abs(double shape,
                                          double scale,
                                          struct PubselEffect **out_handle);

// # Safety
// `out_handle` must be writable.
enum PubselStatus pubsel_effect_t(double location,
                                  double scale,
                                  double df,
                                  struct PubselEffect **out_handle);

// # Safety
// `out_handle` must be writable.
enum PubselStatus pubsel_effect_normal(double mean, double sd, struct PubselEffect **out_handle);

// # Safety
// `out_handle` must be writable.
enum PubselStatus pubsel_effect_point_mass(double value, struct PubselEffect **out_handle);

// # Safety
// `handle` must come from this library or be null.
void pubsel_effect_free(struct PubselEffect *handle);

// Probability that a result significant at `zc` replicates with the same sign.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_replication_probability(const struct PubselEffect *mu,
                                                 double zc,
                                                 double *value);

// Reads a fit document as written by `pubsel fit`.
//
// # Safety
// `json` must be a nul-terminated string; `out_handle` must be writable.
enum PubselStatus pubsel_fit_from_json(const char *json, struct PubselFit **out_handle);

// # Safety
// `handle` must come from this library or be null.
void pubsel_fit_free(struct PubselFit *handle);

// Number of parameters, or 0 for a null handle.
//
// # Safety
// `fit` must be valid or null.
uintptr_t pubsel_fit_n_parameters(const struct PubselFit *fit);

// Name of parameter `i`, owned by the handle; null when out of range.
//
// # Safety
// `fit` must be valid or null.
const char *pubsel_fit_parameter_name(const struct PubselFit *fit, uintptr_t i);

// Estimate and standard error of parameter `i`.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_fit_parameter(const struct PubselFit *fit,
                                       uintptr_t i,
                                       double *estimate,
                                       double *std_error);

// Whether the optimizer met its convergence criteria.
//
// # Safety
// `fit` must be valid or null.
bool pubsel_fit_converged(const struct PubselFit *fit);

// Selection function at the estimated coefficients, as a new handle.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_fit_selection(const struct PubselFit *fit,
                                       struct PubselSelection **out_handle);

// Interval widened for estimation error in the fitted selection function.
//
// # Safety
// Pointers must be valid.
enum PubselStatus pubsel_bonferroni_interval(const struct PubselFit *fit,
                                             double x,
                                             double sigma,
                                             double alpha,
                                             double delta,
                                             struct PubselInterval *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUBSEL_H */
