#ifndef SINKPRUNE_H
#define SINKPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Fixture presets for `sp_model_build_fixture`.
 */
typedef enum SpPreset {
  SP_PRESET_PLANTED = 0,
  SP_PRESET_UNIFORM = 1,
  SP_PRESET_RANDOM = 2,
} SpPreset;

/**
 * Result codes. `SP_OK` is zero; everything else is a failure.
 */
typedef enum SpStatus {
  SP_OK = 0,
  SP_NULL_POINTER = 1,
  SP_INVALID_UTF8 = 2,
  SP_DIMENSION = 3,
  SP_CONFIG = 4,
  SP_INPUT = 5,
  SP_INDEX = 6,
  SP_POLICY = 7,
  SP_UNDEFINED_SCORE = 8,
  SP_DEGENERATE_FIT = 9,
  SP_MALFORMED_MANIFEST = 10,
  SP_INCOMPLETE_CHECKPOINT = 11,
  SP_CORRUPT_WEIGHTS = 12,
  SP_IO = 13,
  SP_PARSE = 14,
  SP_PANIC = 15,
} SpStatus;

/**
 * Opaque model handle.
 */
typedef struct SpModel SpModel;

/**
 * Opaque score-table handle.
 */
typedef struct SpScoreTable SpScoreTable;

/**
 * Model dimensions.
 */
typedef struct SpModelConfig {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t n_kv_heads;
  size_t d_head;
  size_t d_ff;
  size_t vocab_size;
  size_t max_seq_len;
  float rope_theta;
  float norm_eps;
} SpModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *sp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sp_version(void);

/**
 * Loads `path` (a checkpoint stem, or either file of the pair).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SpStatus sp_model_load(const char *path, struct SpModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SpStatus sp_model_save(const struct SpModel *model, const char *path);

/**
 * Builds a synthetic model. Planted presets carry two sink heads, one
 * routing head and one diagonal head.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum SpStatus sp_model_build_fixture(enum SpPreset preset, uint64_t seed, struct SpModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void sp_model_free(struct SpModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SpStatus sp_model_config(const struct SpModel *model, struct SpModelConfig *out);

/**
 * Scores the model over `n_prompts` prompts of `seq_len` tokens stored
 * back to back in `tokens`. `metric` is one of `bos_head`, `bos_layer`,
 * `bi`, `mag`, `wanda`.
 *
 * # Safety
 * `tokens` must hold `n_prompts * seq_len` values; `metric` must be
 * NUL-terminated; `out` must be writable.
 */
enum SpStatus sp_scan(const struct SpModel *model,
                      const uint32_t *tokens,
                      size_t n_prompts,
                      size_t seq_len,
                      const char *metric,
                      struct SpScoreTable **out);

/**
 * Number of entries in a score table; 0 for a null handle.
 *
 * # Safety
 * `table` must be null or a live handle.
 */
size_t sp_score_table_len(const struct SpScoreTable *table);

/**
 * Reads entry `index`. `head` is set to -1 for layer-level tables.
 *
 * # Safety
 * `table` must be a live handle; the out pointers must be writable.
 */
enum SpStatus sp_score_table_get(const struct SpScoreTable *table,
                                 size_t index,
                                 size_t *layer,
                                 int64_t *head,
                                 double *score);

/**
 * # Safety
 * `table` must be null or a handle from this library not yet freed.
 */
void sp_score_table_free(struct SpScoreTable *table);

/**
 * Ranks with `strategy` and returns a new pruned model; the input is left
 * untouched. `table` may be null for `bottom_up` and `top_down`.
 *
 * # Safety
 * Handles must be live; `strategy` NUL-terminated; `out` writable;
 * `units_removed` null or writable.
 */
enum SpStatus sp_prune(const struct SpModel *model,
                       const struct SpScoreTable *table,
                       const char *strategy,
                       double ratio,
                       struct SpModel **out,
                       size_t *units_removed);

/**
 * Perplexity over non-overlapping windows of `seq_len` tokens.
 *
 * # Safety
 * `tokens` must hold `n_tokens` values and `out` must be writable.
 */
enum SpStatus sp_perplexity(const struct SpModel *model,
                            const uint32_t *tokens,
                            size_t n_tokens,
                            size_t seq_len,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SINKPRUNE_H */
