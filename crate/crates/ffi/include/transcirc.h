/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef TRANSCIRC_H
#define TRANSCIRC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_IO = 3,
  TC_STATUS_FORMAT = 4,
  TC_STATUS_DIMENSION_MISMATCH = 5,
  TC_STATUS_NON_FINITE = 6,
  TC_STATUS_DEGENERATE = 7,
  TC_STATUS_MISSING = 8,
  TC_STATUS_BUFFER_TOO_SMALL = 9,
  TC_STATUS_PANIC = 10,
  TC_STATUS_INTERNAL = 11,
} TcStatus;

/**
 * Opaque model handle.
 */
typedef struct TcModel TcModel;

/**
 * Shape of a loaded model.
 */
typedef struct TcModelConfig {
  size_t n_layers;
  size_t n_heads;
  size_t d_model;
  size_t d_head;
  size_t d_ff;
  size_t vocab_size;
  size_t max_seq;
  uint64_t seed;
} TcModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `len`) into `buf`. Returns the full message length plus one,
 * so a caller can size its buffer.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t tc_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tc_version(void);

/**
 * Loads a model file. On success `*out` owns a handle for [`tc_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum TcStatus tc_model_load(const char *path, struct TcModel **out);

/**
 * Releases a handle from [`tc_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not freed before.
 */
void tc_model_free(struct TcModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum TcStatus tc_model_config(const struct TcModel *model, struct TcModelConfig *out);

/**
 * Writes the END-position logits (`vocab_size` values) of `tokens`.
 *
 * # Safety
 * `tokens` valid for `n_tokens` reads, `out` for `out_len` writes.
 */
enum TcStatus tc_model_end_logits(const struct TcModel *model,
                                  const uint32_t *tokens,
                                  size_t n_tokens,
                                  double *out,
                                  size_t out_len);

/**
 * Path-patching score of one sender on one prompt pair.
 *
 * `head < 0` selects the layer's MLP. With `basis_cols == 0` the sender is
 * fully replaced by its counterfactual activation; otherwise `basis` is a
 * row-major `d_model × basis_cols` orthonormal basis and only that subspace
 * is patched. `*out_flagged` is set to 1 when the clean target logit was at
 * or below `epsilon`.
 *
 * # Safety
 * Pointers valid for the stated lengths; outputs valid for a write.
 */
enum TcStatus tc_patch_score(const struct TcModel *model,
                             const uint32_t *positive,
                             const uint32_t *negative,
                             size_t n_tokens,
                             uint32_t target,
                             size_t layer,
                             int32_t head,
                             const double *basis,
                             size_t basis_cols,
                             double epsilon,
                             double *out_delta,
                             int32_t *out_flagged);

/**
 * Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
 *
 * # Safety
 * `a`, `b` valid for their lengths; outputs valid for a write.
 */
enum TcStatus tc_ks_two_sample(const double *a,
                               size_t n_a,
                               const double *b,
                               size_t n_b,
                               double *out_statistic,
                               double *out_p_value);

/**
 * Steering direction of a row-major `d × n` contrastive matrix (one column
 * per prompt pair) with an `r`-dimensional specific subspace. Writes the
 * unit direction (`d` values) to `out`.
 *
 * # Safety
 * `m` valid for `d·n` reads, `out` for `out_len` writes.
 */
enum TcStatus tc_identify_direction(const double *m,
                                    size_t d,
                                    size_t n,
                                    size_t r,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSCIRC_H */
