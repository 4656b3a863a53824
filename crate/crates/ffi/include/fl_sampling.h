// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FL_SAMPLING_H
#define FL_SAMPLING_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlsStatus {
  FLS_STATUS_OK = 0,
  FLS_STATUS_NULL_POINTER = 1,
  FLS_STATUS_INVALID_IMPORTANCE = 2,
  FLS_STATUS_INVALID_SCHEME = 3,
  FLS_STATUS_LENGTH_MISMATCH = 4,
  FLS_STATUS_SUPPORT_TOO_LARGE = 5,
  FLS_STATUS_INTERNAL = 6,
} FlsStatus;

typedef enum FlsSchemeKind {
  FLS_SCHEME_KIND_FULL = 0,
  FLS_SCHEME_KIND_MD = 1,
  FLS_SCHEME_KIND_UNIFORM = 2,
  FLS_SCHEME_KIND_BINOMIAL = 3,
  FLS_SCHEME_KIND_POISSON_BINOMIAL = 4,
  FLS_SCHEME_KIND_CLUSTERED = 5,
  FLS_SCHEME_KIND_OPTIMAL = 6,
  FLS_SCHEME_KIND_POISSON_REWEIGHTED = 7,
} FlsSchemeKind;

/**
 * Opaque importance vector.
 */
typedef struct FlsImportance FlsImportance;

/**
 * Opaque sampling scheme.
 */
typedef struct FlsScheme FlsScheme;

/**
 * Scalar closed-form statistics of a scheme.
 */
typedef struct FlsStats {
  double alpha;
  /**
   * False for clustered sampling, whose covariance is not `−α p_i p_j`.
   */
  bool alpha_exact;
  double var_weight_sum;
  double sigma;
  double gamma;
  double expected_clients;
  /**
   * NaN when `has_var_clients` is false.
   */
  double var_clients;
  bool has_var_clients;
} FlsStats;

typedef struct FlsVerdict {
  bool uniform_better;
  double threshold;
  double sum_p_sq;
  bool degenerate;
} FlsVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an importance vector from `n` positive entries summing to 1.
 *
 * # Safety
 * `p` must point to `n` readable doubles; `out` must be writable.
 */
enum FlsStatus fls_importance_new(const double *p, size_t n, struct FlsImportance **out);

/**
 * Creates an importance vector proportional to `n` positive weights.
 *
 * # Safety
 * As [`fls_importance_new`].
 */
enum FlsStatus fls_importance_from_weights(const double *w, size_t n, struct FlsImportance **out);

/**
 * Number of clients, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t fls_importance_len(const struct FlsImportance *h);

/**
 * # Safety
 * `h` must be null or a handle from `fls_importance_*` not yet freed.
 */
void fls_importance_free(struct FlsImportance *h);

/**
 * Creates a budgeted scheme; clustered uses the water-filled matrix.
 * `kind` is an `FlsSchemeKind` value; optimal sampling needs
 * [`fls_scheme_new_optimal`].
 *
 * # Safety
 * `importance` must be a live handle; `out` must be writable.
 */
enum FlsStatus fls_scheme_new(uint32_t kind,
                              size_t m,
                              const struct FlsImportance *importance,
                              struct FlsScheme **out);

/**
 * Creates an optimal-sampling scheme with inclusion probabilities `q`.
 *
 * # Safety
 * `q` must point to `n` readable doubles; `out` must be writable.
 */
enum FlsStatus fls_scheme_new_optimal(const double *q, size_t n, struct FlsScheme **out);

/**
 * # Safety
 * `h` must be null or a handle from `fls_scheme_*` not yet freed.
 */
void fls_scheme_free(struct FlsScheme *h);

/**
 * Closed-form statistics. `var_weight` may be null; otherwise it must
 * hold `len == n` doubles and receives `Var[ω_i]`.
 *
 * # Safety
 * Handles must be live; `out` must be writable; `var_weight` as above.
 */
enum FlsStatus fls_closed_form_stats(const struct FlsScheme *scheme,
                                     const struct FlsImportance *importance,
                                     struct FlsStats *out,
                                     double *var_weight,
                                     size_t len);

/**
 * Draws one weight realization from a stream seeded by `seed`.
 * `omega` must hold `len == n` doubles; `participants` may be null.
 *
 * # Safety
 * Handles must be live; buffers as described.
 */
enum FlsStatus fls_draw(const struct FlsScheme *scheme,
                        const struct FlsImportance *importance,
                        uint64_t seed,
                        double *omega,
                        size_t len,
                        size_t *participants);

/**
 * Uniform-vs-MD comparison at budget `m`.
 *
 * # Safety
 * `importance` must be live; `out` must be writable.
 */
enum FlsStatus fls_corollary_compare(const struct FlsImportance *importance,
                                     size_t m,
                                     struct FlsVerdict *out);

/**
 * Message of the last failure on this thread; empty after a success.
 * Valid until the next `fls_*` call on the same thread.
 */
const char *fls_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fls_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FL_SAMPLING_H */
