#ifndef DCREC_H
#define DCREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Stage selector for [`dcrec_evaluate`].
 */
#define DCREC_STAGE_VALID 0

#define DCREC_STAGE_TEST 1

typedef enum DcrecStatus {
  DCREC_STATUS_OK = 0,
  DCREC_STATUS_NULL_POINTER = 1,
  DCREC_STATUS_INVALID_ARGUMENT = 2,
  DCREC_STATUS_IO = 3,
  DCREC_STATUS_PARSE = 4,
  DCREC_STATUS_CONFIG = 5,
  DCREC_STATUS_RUNTIME = 6,
  DCREC_STATUS_PANIC = 7,
} DcrecStatus;

/**
 * A prepared leave-one-out dataset.
 */
typedef struct DcrecDataset DcrecDataset;

/**
 * A trained model bound to the dataset it was trained or loaded against.
 */
typedef struct DcrecModel DcrecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a `user<TAB>item<TAB>timestamp` file and split it leave-one-out.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum DcrecStatus dcrec_dataset_load(const char *path,
                                    size_t t_max,
                                    size_t min_length,
                                    struct DcrecDataset **out);

/**
 * Generate a synthetic corpus in memory and split it leave-one-out.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DcrecStatus dcrec_dataset_synthesize(size_t users,
                                          size_t items,
                                          size_t mean_length,
                                          double conformity_fraction,
                                          double zipf_exponent,
                                          uint64_t seed,
                                          size_t t_max,
                                          size_t min_length,
                                          struct DcrecDataset **out);

/**
 * Number of real items; item tokens run from 1 to this value.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum DcrecStatus dcrec_dataset_catalog_size(const struct DcrecDataset *dataset, size_t *out);

/**
 * Number of users kept after filtering.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum DcrecStatus dcrec_dataset_user_count(const struct DcrecDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` must be null or a handle from this library, not yet freed.
 */
void dcrec_dataset_free(struct DcrecDataset *dataset);

/**
 * Train on `dataset`. `config_text` holds `key = value` lines (null for
 * defaults); `out_dir` (nullable) receives checkpoint, metrics and loss log.
 *
 * # Safety
 * Pointers must be valid; string arguments NUL-terminated.
 */
enum DcrecStatus dcrec_train(const struct DcrecDataset *dataset,
                             const char *config_text,
                             const char *out_dir,
                             struct DcrecModel **out);

/**
 * Load a checkpoint and bind it to `dataset`, which must carry the same ids
 * the model was trained with.
 *
 * # Safety
 * Pointers must be valid; `path` NUL-terminated.
 */
enum DcrecStatus dcrec_model_load(const char *path,
                                  const struct DcrecDataset *dataset,
                                  struct DcrecModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum DcrecStatus dcrec_model_save(const struct DcrecModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void dcrec_model_free(struct DcrecModel *model);

/**
 * Evaluate on the validation (0) or test (1) stage; `out_json` receives a
 * metrics document to release with [`dcrec_string_free`].
 *
 * # Safety
 * Handles must be live and `out_json` valid.
 */
enum DcrecStatus dcrec_evaluate(const struct DcrecModel *model,
                                const struct DcrecDataset *dataset,
                                int32_t stage,
                                char **out_json);

/**
 * Score every item for one history of item tokens (1-based). Writes
 * `catalog_size` scores into `scores`; entry `j` is the score of token `j+1`.
 *
 * # Safety
 * `history` must point to `history_len` tokens and `scores` to `capacity`
 * writable doubles.
 */
enum DcrecStatus dcrec_score_user(const struct DcrecModel *model,
                                  const size_t *history,
                                  size_t history_len,
                                  double *scores,
                                  size_t capacity);

/**
 * Positive-sample contribution curve at similarity `p`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DcrecStatus dcrec_f1(double p, double tau, double *out);

/**
 * Negative-sample contribution curve at similarity `n`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DcrecStatus dcrec_f2(double n, double tau, double *out);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dcrec_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void dcrec_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dcrec_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCREC_H */
