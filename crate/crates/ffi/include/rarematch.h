#ifndef RAREMATCH_H
#define RAREMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  RM_STATUS_OK = 0,
  RM_STATUS_NULL_ARGUMENT = 1,
  RM_STATUS_INVALID_UTF8 = 2,
  RM_STATUS_IO = 3,
  RM_STATUS_FORMAT = 4,
  RM_STATUS_CONFIG = 5,
  RM_STATUS_CONTRACT = 6,
  RM_STATUS_UNKNOWN_ID = 7,
  RM_STATUS_USAGE = 8,
  RM_STATUS_UNDEFINED_METRIC = 9,
  RM_STATUS_BUSY = 10,
  RM_STATUS_INTERNAL = 99,
} RmStatus;

/**
 * Opened shard cache.
 */
typedef struct RmCache RmCache;

/**
 * Trained model: scores images with its EMA weights.
 */
typedef struct RmModel RmModel;

/**
 * Active-learning session loaded from a session directory.
 */
typedef struct RmSession RmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *rm_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *rm_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
RmStatus rm_model_load(const char *path, RmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rm_model_load`] and not be used afterwards.
 */
void rm_model_free(RmModel *model);

/**
 * Input shape the model expects.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
RmStatus rm_model_input_shape(const RmModel *model,
                              uintptr_t *channels,
                              uintptr_t *height,
                              uintptr_t *width);

/**
 * Anomaly scores for `n_images` images stored back to back in CHW layout
 * with values in [0, 1]. `scores` receives `n_images` values.
 *
 * # Safety
 * `pixels` must hold `n_images * C * H * W` floats and `scores` room for
 * `n_images` floats.
 */
RmStatus rm_model_score(const RmModel *model,
                        const float *pixels,
                        uintptr_t n_images,
                        float *scores);

/**
 * Opens a shard cache directory; fails if any shard is invalid.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
RmStatus rm_cache_open(const char *path, RmCache **out);

/**
 * Releases a cache. Null is ignored.
 *
 * # Safety
 * `cache` must come from [`rm_cache_open`] and not be used afterwards.
 */
void rm_cache_free(RmCache *cache);

/**
 * Number of images in the cache.
 *
 * # Safety
 * `cache` must be a live handle; `len` must be writable.
 */
RmStatus rm_cache_len(const RmCache *cache, uintptr_t *len);

/**
 * Scores every image of `cache`, writing `id,score` rows in shard order to
 * `scores_csv` and the `top_k` best, ranked, to `topk_csv`. `scored`
 * (optional) receives the image count.
 *
 * # Safety
 * Handles must be live; paths must be valid C strings.
 */
RmStatus rm_score_cache(const RmModel *model,
                        const RmCache *cache,
                        uintptr_t top_k,
                        uintptr_t workers,
                        const char *scores_csv,
                        const char *topk_csv,
                        uintptr_t *scored);

/**
 * Loads a session directory whose images live in its configured cache.
 *
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
RmStatus rm_session_load(const char *dir, RmSession **out);

/**
 * Releases a session. Null is ignored.
 *
 * # Safety
 * `session` must come from [`rm_session_load`] and not be used afterwards.
 */
void rm_session_free(RmSession *session);

/**
 * Number of completed cycles.
 *
 * # Safety
 * `session` must be a live handle; `cycle` must be writable.
 */
RmStatus rm_session_cycle(const RmSession *session, uint32_t *cycle);

/**
 * Runs one training cycle and re-ranks the pool. `auroc` (optional)
 * receives the evaluation AUROC, or NaN when it is undefined.
 *
 * # Safety
 * `session` must be a live handle not used concurrently.
 */
RmStatus rm_session_run_cycle(RmSession *session, double *auroc);

/**
 * Commits one label: 0 normal, 1 anomaly.
 *
 * # Safety
 * `session` must be a live handle; `id` a valid C string.
 */
RmStatus rm_session_add_label(RmSession *session, const char *id, uint8_t label);

/**
 * Writes the session to `dir`.
 *
 * # Safety
 * `session` must be a live handle; `dir` a valid C string.
 */
RmStatus rm_session_save(const RmSession *session, const char *dir);

/**
 * Rank-based AUROC of `n` scores against labels (0 normal, 1 anomaly).
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be writable.
 */
RmStatus rm_auroc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

/**
 * Average precision of `n` scores against labels.
 *
 * # Safety
 * As [`rm_auroc`].
 */
RmStatus rm_auprc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

/**
 * Percentage of anomalies within the top `percent` of scores. Equal scores
 * are ordered by position.
 *
 * # Safety
 * As [`rm_auroc`].
 */
RmStatus rm_efficiency_at(const double *scores,
                          const uint8_t *labels,
                          uintptr_t n,
                          double percent,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAREMATCH_H */
