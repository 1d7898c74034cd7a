#ifndef MPSEG_H
#define MPSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 1 to 5 match the command-line exit
 * codes.
 */
typedef enum MpsegStatus {
  MPSEG_STATUS_OK = 0,
  MPSEG_STATUS_CHECK_FAILED = 1,
  MPSEG_STATUS_CONFIG = 2,
  MPSEG_STATUS_IO = 3,
  MPSEG_STATUS_NUMERIC = 4,
  MPSEG_STATUS_COMPAT = 5,
  MPSEG_STATUS_NULL_ARGUMENT = 6,
  MPSEG_STATUS_INVALID_ARGUMENT = 7,
  MPSEG_STATUS_PANIC = 8,
} MpsegStatus;

/**
 * Generated or loaded scenes.
 */
typedef struct MpsegDataset MpsegDataset;

/**
 * Decoder parameters.
 */
typedef struct MpsegModel MpsegModel;

typedef struct MpsegDims {
  size_t num_queries;
  size_t num_layers;
  size_t dim;
  size_t ffn_dim;
  size_t num_categories;
} MpsegDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mpseg_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on this thread.
 */
const char *mpseg_last_error(void);

/**
 * Generates a dataset from a JSON synth config (null for defaults).
 *
 * # Safety
 * `synth_json` is null or a NUL-terminated string; `out` is writable.
 */
enum MpsegStatus mpseg_dataset_generate(const char *synth_json, struct MpsegDataset **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum MpsegStatus mpseg_dataset_load(const char *path, struct MpsegDataset **out);

/**
 * # Safety
 * `ds` comes from this library; `path` is a NUL-terminated string.
 */
enum MpsegStatus mpseg_dataset_save(const struct MpsegDataset *ds, const char *path);

/**
 * # Safety
 * `ds` comes from this library; `out` is writable.
 */
enum MpsegStatus mpseg_dataset_num_scenes(const struct MpsegDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` comes from this library; `out` is writable.
 */
enum MpsegStatus mpseg_dataset_num_instances(const struct MpsegDataset *ds,
                                             size_t scene,
                                             size_t *out);

/**
 * # Safety
 * `ds` is null or comes from this library and is not used afterwards.
 */
void mpseg_dataset_free(struct MpsegDataset *ds);

/**
 * Trains with a JSON run config (null for defaults) on `ds`; the config's
 * synth section is replaced by the dataset's own.
 *
 * # Safety
 * `run_json` is null or a NUL-terminated string; `ds` comes from this
 * library; `out` is writable.
 */
enum MpsegStatus mpseg_model_train(const char *run_json,
                                   const struct MpsegDataset *ds,
                                   struct MpsegModel **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum MpsegStatus mpseg_model_load(const char *path, struct MpsegModel **out);

/**
 * # Safety
 * `model` comes from this library; `path` is a NUL-terminated string.
 */
enum MpsegStatus mpseg_model_save(const struct MpsegModel *model, const char *path);

/**
 * # Safety
 * `model` comes from this library; `out` is writable.
 */
enum MpsegStatus mpseg_model_dims(const struct MpsegModel *model, struct MpsegDims *out);

/**
 * # Safety
 * `model` is null or comes from this library and is not used afterwards.
 */
void mpseg_model_free(struct MpsegModel *model);

/**
 * Final-layer mask logits of one scene, row-major `num_queries × H × W`.
 * `out_len` always receives the required length; when `capacity` is too
 * small nothing else is written and `MPSEG_STATUS_INVALID_ARGUMENT` is
 * returned.
 *
 * # Safety
 * `model` and `ds` come from this library; `out_logits` holds `capacity`
 * doubles (may be null when `capacity` is 0); `out_len` is writable.
 */
enum MpsegStatus mpseg_model_predict(const struct MpsegModel *model,
                                     const struct MpsegDataset *ds,
                                     size_t scene,
                                     double *out_logits,
                                     size_t capacity,
                                     size_t *out_len);

/**
 * Evaluates `model` on every scene of `ds` and returns the metrics report
 * text; release it with [`mpseg_string_free`].
 *
 * # Safety
 * `model` and `ds` come from this library; `out` is writable.
 */
enum MpsegStatus mpseg_model_evaluate(const struct MpsegModel *model,
                                      const struct MpsegDataset *ds,
                                      char **out);

/**
 * # Safety
 * `s` is null or a string returned by this library, not used afterwards.
 */
void mpseg_string_free(char *s);

/**
 * IoU of two `height × width` masks given as bytes (nonzero = set). Two
 * empty masks have IoU 1.
 *
 * # Safety
 * `a` and `b` each hold `height * width` bytes; `out` is writable.
 */
enum MpsegStatus mpseg_mask_iou(size_t height,
                                size_t width,
                                const uint8_t *a,
                                const uint8_t *b,
                                double *out);

/**
 * Minimum-cost assignment of a row-major `rows × cols` cost matrix.
 * `out_match[r]` receives the matched column of row `r` or -1.
 *
 * # Safety
 * `cost` holds `rows * cols` doubles, `out_match` holds `rows` entries and
 * `out_cost` is writable.
 */
enum MpsegStatus mpseg_hungarian(const double *cost,
                                 size_t rows,
                                 size_t cols,
                                 ptrdiff_t *out_match,
                                 double *out_cost);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPSEG_H */
