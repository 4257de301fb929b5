#ifndef TAGG_H
#define TAGG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum TaggStatus {
  TAGG_STATUS_OK = 0,
  TAGG_STATUS_NULL_POINTER = 1,
  TAGG_STATUS_INVALID_ARGUMENT = 2,
  TAGG_STATUS_CONFIG = 3,
  TAGG_STATUS_FORMAT = 4,
  TAGG_STATUS_IO = 5,
  TAGG_STATUS_DIMENSION = 6,
  TAGG_STATUS_GRAMMAR = 7,
  TAGG_STATUS_BUFFER_TOO_SMALL = 8,
  TAGG_STATUS_PANIC = 9,
} TaggStatus;

/**
 * A trained model with its run configuration.
 */
typedef struct TaggModel TaggModel;

/**
 * A frame sequence read from a feature file.
 */
typedef struct TaggSequence TaggSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next failing call.
 */
const char *tagg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tagg_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TaggStatus tagg_model_load(const char *path, struct TaggModel **out);

/**
 * # Safety
 * `model` must come from `tagg_model_load` and not be used afterwards. Null is ignored.
 */
void tagg_model_free(struct TaggModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TaggStatus tagg_model_save(const struct TaggModel *model, const char *path);

/**
 * Writes the checkpoint SHA-256 as 64 hex characters plus NUL; `cap` must be at least 65.
 *
 * # Safety
 * `model` must be a live handle and `buf` valid for `cap` bytes.
 */
enum TaggStatus tagg_model_hash(const struct TaggModel *model, char *buf, size_t cap);

/**
 * Action vocabulary size of the model.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t tagg_model_num_actions(const struct TaggModel *model);

/**
 * Per-frame feature width the model expects.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t tagg_model_input_dim(const struct TaggModel *model);

/**
 * Next-action scores after observing frames `0..=t` of a `n_frames x dim`
 * row-major feature buffer. Writes `num_actions` softmax scores to `scores`
 * and the arg-max to `action` (either may be null).
 *
 * # Safety
 * `features` must hold `n_frames * dim` values and `scores` (if non-null) `scores_len`.
 */
enum TaggStatus tagg_model_predict(const struct TaggModel *model,
                                   const double *features,
                                   size_t n_frames,
                                   size_t dim,
                                   double fps,
                                   size_t t,
                                   double *scores,
                                   size_t scores_len,
                                   size_t *action);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TaggStatus tagg_sequence_read(const char *path, struct TaggSequence **out);

/**
 * # Safety
 * `seq` must come from `tagg_sequence_read` and not be used afterwards. Null is ignored.
 */
void tagg_sequence_free(struct TaggSequence *seq);

/**
 * # Safety
 * `seq` must be a live handle or null (returns 0).
 */
size_t tagg_sequence_len(const struct TaggSequence *seq);

/**
 * # Safety
 * `seq` must be a live handle or null (returns 0).
 */
size_t tagg_sequence_dim(const struct TaggSequence *seq);

/**
 * Borrowed pointer to the `len x dim` features; valid while `seq` lives.
 *
 * # Safety
 * `seq` must be a live handle or null (returns null).
 */
const double *tagg_sequence_features(const struct TaggSequence *seq);

/**
 * Class with the highest mean softmax over `n_models` rows of `n_classes` logits.
 *
 * # Safety
 * `logits` must hold `n_models * n_classes` values and `out` be valid.
 */
enum TaggStatus tagg_ensemble_infer(const double *logits,
                                    size_t n_models,
                                    size_t n_classes,
                                    size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAGG_H */
