#ifndef MICRONAS_H
#define MICRONAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MN_OK 0

/**
 * A required pointer argument was NULL.
 */
#define MN_ERR_NULL 1

/**
 * A file could not be read.
 */
#define MN_ERR_IO 2

/**
 * A model or table file is malformed or has an unsupported version.
 */
#define MN_ERR_FORMAT 3

/**
 * An argument does not fit the model (length, shape, missing int8 data).
 */
#define MN_ERR_INPUT 4

/**
 * The latency table lacks an operator the model uses.
 */
#define MN_ERR_MISSING_ENTRY 5

/**
 * An output buffer is too small.
 */
#define MN_ERR_BUFFER 6

/**
 * Any other failure, including a caught panic.
 */
#define MN_ERR_INTERNAL 7

/**
 * A loaded model.
 */
typedef struct MnModel MnModel;

/**
 * A loaded latency table.
 */
typedef struct MnTable MnTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mn_version(void);

/**
 * Message of the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *mn_last_error(void);

/**
 * Loads a model file (float or int8 storage).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t mn_model_load(const char *path, struct MnModel **out);

/**
 * # Safety
 * `model` must come from `mn_model_load` and not be freed twice.
 */
void mn_model_free(struct MnModel *model);

/**
 * Window length, channel count and class count of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
int32_t mn_model_shape(const struct MnModel *model,
                       size_t *window_len,
                       size_t *channels,
                       size_t *classes);

/**
 * 1 if the model carries int8 parameters, 0 otherwise.
 *
 * # Safety
 * `model` must be valid or NULL.
 */
int32_t mn_model_has_int8(const struct MnModel *model);

/**
 * Classifies one raw window of `window_len * channels` values, time-major
 * (all channels of step 0, then step 1, ...). The window is normalized
 * with the statistics stored in the model. Writes `classes` probabilities.
 *
 * # Safety
 * `window` must hold `len` values and `probs` room for `probs_len`.
 */
int32_t mn_model_predict(const struct MnModel *model,
                         const double *window,
                         size_t len,
                         int32_t int8,
                         double *probs,
                         size_t probs_len);

/**
 * Loads a latency table.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t mn_table_load(const char *path, struct MnTable **out);

/**
 * # Safety
 * `table` must come from `mn_table_load` and not be freed twice.
 */
void mn_table_free(struct MnTable *table);

/**
 * Int8 latency and peak memory measured by replaying the model's
 * operators against the table.
 *
 * # Safety
 * All pointers must be valid.
 */
int32_t mn_model_replay(const struct MnModel *model,
                        const struct MnTable *table,
                        double *latency_ms,
                        uint64_t *peak_mem_bytes);

/**
 * Int8 latency and peak memory of the model's architecture from the
 * table-based estimator used during search.
 *
 * # Safety
 * All pointers must be valid.
 */
int32_t mn_model_estimate(const struct MnModel *model,
                          const struct MnTable *table,
                          double *latency_ms,
                          double *peak_mem_bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MICRONAS_H */
