#ifndef BAYESROM_H
#define BAYESROM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum BayesromStatus {
  BAYESROM_STATUS_OK = 0,
  BAYESROM_STATUS_NULL_POINTER = 1,
  BAYESROM_STATUS_INVALID_ARGUMENT = 2,
  BAYESROM_STATUS_DIMENSION_MISMATCH = 3,
  // Rank deficiency, ill conditioning, or a failed factorization.
  BAYESROM_STATUS_NUMERICAL = 4,
  BAYESROM_STATUS_IO = 5,
  // Malformed input file or data.
  BAYESROM_STATUS_FORMAT = 6,
  // A Rust panic was caught at the boundary.
  BAYESROM_STATUS_PANIC = 7,
} BayesromStatus;

// Gaussian posterior over the operator matrix.
typedef struct BayesromPosterior BayesromPosterior;

// One deterministic reduced model (a posterior mean or a draw).
typedef struct BayesromRom BayesromRom;

// Operator blocks carried by a model; mirrors the library's structure flags.
// Input blocks are not exposed, so there is no `inputs` field.
typedef struct BayesromStructure {
  bool linear;
  bool quadratic;
  bool constant;
} BayesromStructure;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bayesrom_version(void);

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into the library on this thread.
const char *bayesrom_last_error(void);

// Number of operator entries per row, `d(r)`, for the given structure.
size_t bayesrom_operator_width(size_t r, struct BayesromStructure structure);

// Fit the posterior with a fixed penalty `lambdas[i]` on every entry of row `i`.
//
// # Safety
// `states` and `derivatives` must point to `r*k` doubles, `lambdas` to `r`
// doubles, and `out` to writable storage for one handle.
enum BayesromStatus bayesrom_posterior_fit(const double *states,
                                           const double *derivatives,
                                           size_t r,
                                           size_t k,
                                           struct BayesromStructure structure,
                                           const double *lambdas,
                                           struct BayesromPosterior **out);

// Fit the posterior with penalties chosen by the evidence fixed-point
// iteration from `initial_lambda`. `converged` and `iterations` may be null.
//
// # Safety
// As [`bayesrom_posterior_fit`]; `converged` and `iterations`, when not
// null, must be writable.
enum BayesromStatus bayesrom_posterior_fit_evidence(const double *states,
                                                    const double *derivatives,
                                                    size_t r,
                                                    size_t k,
                                                    struct BayesromStructure structure,
                                                    double initial_lambda,
                                                    double tolerance,
                                                    size_t max_iterations,
                                                    struct BayesromPosterior **out,
                                                    bool *converged,
                                                    size_t *iterations);

// Read a posterior written by the command-line tool or [`bayesrom_posterior_save`].
//
// # Safety
// `file` must be a NUL-terminated string and `out` writable.
enum BayesromStatus bayesrom_posterior_load(const char *file, struct BayesromPosterior **out);

// Write the posterior as JSON.
//
// # Safety
// `posterior` must be a live handle and `file` a NUL-terminated string.
enum BayesromStatus bayesrom_posterior_save(const struct BayesromPosterior *posterior,
                                            const char *file);

// Reduced dimension `r`, or 0 for a null handle.
//
// # Safety
// `posterior` must be null or a live handle.
size_t bayesrom_posterior_rank(const struct BayesromPosterior *posterior);

// Operator entries per row, or 0 for a null handle.
//
// # Safety
// `posterior` must be null or a live handle.
size_t bayesrom_posterior_width(const struct BayesromPosterior *posterior);

// Copy the posterior mean operator (`r × d`, column-major) into `out`.
//
// # Safety
// `posterior` must be a live handle and `out` must hold `len` doubles.
enum BayesromStatus bayesrom_posterior_mean(const struct BayesromPosterior *posterior,
                                            double *out,
                                            size_t len);

// Copy the noise variances `σ*²` (one per row) into `out`.
//
// # Safety
// `posterior` must be a live handle and `out` must hold `len` doubles.
enum BayesromStatus bayesrom_posterior_noise_variances(const struct BayesromPosterior *posterior,
                                                       double *out,
                                                       size_t len);

// Copy the `d × d` covariance of row `row` (column-major) into `out`.
//
// # Safety
// `posterior` must be a live handle and `out` must hold `len` doubles.
enum BayesromStatus bayesrom_posterior_row_covariance(const struct BayesromPosterior *posterior,
                                                      size_t row,
                                                      double *out,
                                                      size_t len);

// Release a posterior handle; null is ignored.
//
// # Safety
// `posterior` must be null or a handle not yet freed.
void bayesrom_posterior_free(struct BayesromPosterior *posterior);

// Reduced model with the posterior mean operators.
//
// # Safety
// `posterior` must be a live handle and `out` writable.
enum BayesromStatus bayesrom_rom_from_mean(const struct BayesromPosterior *posterior,
                                           struct BayesromRom **out);

// Posterior draw number `index` under `seed`; the same pair always gives
// the same operators.
//
// # Safety
// `posterior` must be a live handle and `out` writable.
enum BayesromStatus bayesrom_rom_sample(const struct BayesromPosterior *posterior,
                                        uint64_t seed,
                                        uint64_t index,
                                        struct BayesromRom **out);

// Reduced model from an explicit `r × d` operator matrix (column-major).
//
// # Safety
// `operator` must hold `r * bayesrom_operator_width(r, structure)` doubles
// and `out` must be writable.
enum BayesromStatus bayesrom_rom_new(const double *operator_,
                                     size_t r,
                                     struct BayesromStructure structure,
                                     struct BayesromRom **out);

// Integrate from `q0` and write the state at each of the `n_times` grid
// points into `out` (`r × n_times`, column-major). A bound `≤ 0` or NaN
// checks finiteness only. After a blow-up `*stable` is false and the
// remaining columns are NaN.
//
// # Safety
// `rom` must be a live handle; `q0` must hold `r` doubles, `times`
// `n_times` doubles, `out` `r * n_times` doubles; `stable` must be writable.
enum BayesromStatus bayesrom_rom_integrate(const struct BayesromRom *rom,
                                           const double *q0,
                                           const double *times,
                                           size_t n_times,
                                           double bound,
                                           double *out,
                                           bool *stable);

// Reduced dimension of a model, or 0 for a null handle.
//
// # Safety
// `rom` must be null or a live handle.
size_t bayesrom_rom_rank(const struct BayesromRom *rom);

// Release a model handle; null is ignored.
//
// # Safety
// `rom` must be null or a handle not yet freed.
void bayesrom_rom_free(struct BayesromRom *rom);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAYESROM_H */
