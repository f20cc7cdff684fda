#ifndef SPLITLEAK_H
#define SPLITLEAK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_ARGUMENT = 2,
  SL_STATUS_SHAPE_MISMATCH = 3,
  SL_STATUS_DEGENERATE = 4,
  SL_STATUS_CONFIG = 5,
  SL_STATUS_PROTOCOL = 6,
  SL_STATUS_IO = 7,
  SL_STATUS_INTERNAL = 8,
  SL_STATUS_PANIC = 9,
} SlStatus;

typedef enum SlAssignmentRule {
  SL_ASSIGNMENT_RULE_BY_SIZE = 0,
  SL_ASSIGNMENT_RULE_BY_SCORE = 1,
} SlAssignmentRule;

typedef enum SlLeakMode {
  SL_LEAK_MODE_SCORES = 0,
  SL_LEAK_MODE_HARD_LABELS = 1,
} SlLeakMode;

/**
 * Output of one spectral attack.
 */
typedef struct SlAttackResult SlAttackResult;

/**
 * Row-major matrix of f64.
 */
typedef struct SlMatrix SlMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *sl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sl_version(void);

/**
 * Copies `rows * cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum SlStatus sl_matrix_new(size_t rows, size_t cols, const double *data, struct SlMatrix **out);

/**
 * # Safety
 * `m` must be null or a live handle from [`sl_matrix_new`].
 */
size_t sl_matrix_rows(const struct SlMatrix *m);

/**
 * # Safety
 * `m` must be null or a live handle from [`sl_matrix_new`].
 */
size_t sl_matrix_cols(const struct SlMatrix *m);

/**
 * # Safety
 * `m` must be null or a handle from [`sl_matrix_new`] not yet freed.
 */
void sl_matrix_free(struct SlMatrix *m);

/**
 * Rank-based AUC of `scores` against 0/1 `labels`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum SlStatus sl_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Sample distance correlation between the rows of `m` and scalar `labels`.
 *
 * # Safety
 * `labels` must hold `n` doubles; `out` must be writable.
 */
enum SlStatus sl_distance_correlation(const struct SlMatrix *m,
                                      const double *labels,
                                      size_t n,
                                      double *out);

/**
 * Runs the spectral attack on one batch. A NaN `expected_positive_ratio`
 * means no prior ratio.
 *
 * # Safety
 * `m` must be a live matrix handle; `out` must be writable.
 */
enum SlStatus sl_spectral_attack(const struct SlMatrix *m,
                                 enum SlAssignmentRule rule,
                                 double expected_positive_ratio,
                                 struct SlAttackResult **out);

/**
 * # Safety
 * `r` must be null or a live attack result.
 */
size_t sl_attack_result_len(const struct SlAttackResult *r);

/**
 * 1 if the attack abstained, 0 otherwise, -1 for a null handle.
 *
 * # Safety
 * `r` must be null or a live attack result.
 */
int32_t sl_attack_result_degenerate(const struct SlAttackResult *r);

/**
 * # Safety
 * `r` must be null or a live attack result.
 */
double sl_attack_result_boundary(const struct SlAttackResult *r);

/**
 * Writes the per-row attack scores for `mode` into `out` (length `len`).
 *
 * # Safety
 * `r` must be a live attack result; `out` must hold `len` doubles.
 */
enum SlStatus sl_attack_result_scores(const struct SlAttackResult *r,
                                      enum SlLeakMode mode,
                                      double *out,
                                      size_t len);

/**
 * Writes the 0/1 hard labels into `out` (length `len`).
 *
 * # Safety
 * `r` must be a live attack result; `out` must hold `len` bytes.
 */
enum SlStatus sl_attack_result_hard_labels(const struct SlAttackResult *r,
                                           uint8_t *out,
                                           size_t len);

/**
 * # Safety
 * `r` must be null or a result not yet freed.
 */
void sl_attack_result_free(struct SlAttackResult *r);

/**
 * Per-row gradient norms, written into `out` (length `len` = rows).
 *
 * # Safety
 * `grad` must be a live matrix handle; `out` must hold `len` doubles.
 */
enum SlStatus sl_norm_attack(const struct SlMatrix *grad, double *out, size_t len);

/**
 * AUC of attack scores against true labels.
 *
 * # Safety
 * Same contract as [`sl_auc`].
 */
enum SlStatus sl_leak_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Trains one experiment from a JSON config. On success `*out` receives a
 * JSON object `{"records": [...], "audit_violations": [...]}` to be released
 * with [`sl_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_experiment_run(const char *config_json, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void sl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITLEAK_H */
