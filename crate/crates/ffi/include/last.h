#ifndef LAST_H
#define LAST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Non-zero values other than the argument
 * and panic codes match the `last` CLI exit codes.
 */
typedef enum LastStatus {
  LAST_STATUS_OK = 0,
  /**
   * A required pointer was NULL or a string was not UTF-8.
   */
  LAST_STATUS_INVALID_ARGUMENT = 1,
  LAST_STATUS_CONFIG = 2,
  LAST_STATUS_IO = 3,
  LAST_STATUS_NUMERIC = 4,
  /**
   * The library panicked; the handle arguments should be treated as lost.
   */
  LAST_STATUS_PANIC = 5,
} LastStatus;

/**
 * Frozen backbone weights plus their encode counter.
 */
typedef struct LastBackbone LastBackbone;

/**
 * Read-only view of an extracted tap cache.
 */
typedef struct LastCache LastCache;

typedef struct LastDataset LastDataset;

typedef struct LastSideNetwork LastSideNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *last_error_message(void);

/**
 * Library version, a static string.
 */
const char *last_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is NULL or a string from this library not yet freed.
 */
void last_string_free(char *s);

/**
 * Synthetic backbone for the configuration's `backbone` section.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_backbone_init(const char *config_json,
                                   uint64_t seed,
                                   struct LastBackbone **out);

/**
 * # Safety
 * `path_` is a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_backbone_load(const char *path_, struct LastBackbone **out);

/**
 * # Safety
 * `h` is a live backbone handle; `path_` is a NUL-terminated string.
 */
enum LastStatus last_backbone_save(const struct LastBackbone *h, const char *path_);

/**
 * SHA-256 of the weights as lowercase hex; free with [`last_string_free`].
 *
 * # Safety
 * `h` is a live backbone handle; `out` is writable.
 */
enum LastStatus last_backbone_checksum(const struct LastBackbone *h, char **out);

/**
 * Images encoded by this backbone so far.
 *
 * # Safety
 * `h` is a live backbone handle; `out` is writable.
 */
enum LastStatus last_backbone_forward_count(const struct LastBackbone *h, size_t *out);

/**
 * # Safety
 * `h` is NULL or a backbone handle not yet freed.
 */
void last_backbone_free(struct LastBackbone *h);

/**
 * The `synth-cls` task described by the configuration's `data` section.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_dataset_generate(const char *config_json,
                                      uint64_t seed,
                                      struct LastDataset **out);

/**
 * # Safety
 * `dir` is a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_dataset_load(const char *dir, struct LastDataset **out);

/**
 * # Safety
 * `h` is a live dataset handle; `dir` is a NUL-terminated string.
 */
enum LastStatus last_dataset_save(const struct LastDataset *h, const char *dir);

/**
 * # Safety
 * `h` is a live dataset handle; `out` is writable.
 */
enum LastStatus last_dataset_len(const struct LastDataset *h, size_t *out);

/**
 * # Safety
 * `h` is NULL or a dataset handle not yet freed.
 */
void last_dataset_free(struct LastDataset *h);

/**
 * Extracts taps at `gap` into `dir`. `up_to_date` (may be NULL) receives 1
 * when an identical cache was already present and nothing was recomputed.
 *
 * # Safety
 * `dataset` and `backbone` are live handles; `dir` is a NUL-terminated
 * string; `up_to_date` is NULL or writable.
 */
enum LastStatus last_cache_extract(const struct LastDataset *dataset,
                                   const struct LastBackbone *backbone,
                                   size_t gap,
                                   const char *dir,
                                   int32_t *up_to_date);

/**
 * # Safety
 * `dir` is a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_cache_open(const char *dir, struct LastCache **out);

/**
 * Samples in the cache.
 *
 * # Safety
 * `h` is a live cache handle; `out` is writable.
 */
enum LastStatus last_cache_len(const struct LastCache *h, size_t *out);

/**
 * # Safety
 * `h` is NULL or a cache handle not yet freed.
 */
void last_cache_free(struct LastCache *h);

/**
 * Side network for the configuration's `side` and `backbone` sections.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_side_init(const char *config_json,
                               uint64_t seed,
                               struct LastSideNetwork **out);

/**
 * # Safety
 * `path_` is a NUL-terminated string; `out` is writable.
 */
enum LastStatus last_side_load(const char *path_, struct LastSideNetwork **out);

/**
 * # Safety
 * `h` is a live side-network handle; `path_` is a NUL-terminated string.
 */
enum LastStatus last_side_save(const struct LastSideNetwork *h, const char *path_);

/**
 * Trainable parameters, with or without the classification head.
 *
 * # Safety
 * `h` is a live side-network handle; `out` is writable.
 */
enum LastStatus last_side_param_count(const struct LastSideNetwork *h,
                                      bool include_head,
                                      size_t *out);

/**
 * # Safety
 * `h` is NULL or a side-network handle not yet freed.
 */
void last_side_free(struct LastSideNetwork *h);

/**
 * Trains the configured side network on `cache`. When `out_dir` is not
 * NULL the weights and metric log are written there as `<run_id>.lasts`
 * and `<run_id>.jsonl`. `out_side` (may be NULL) receives the trained
 * network; `out_log` (may be NULL) the JSON-lines metric log.
 *
 * # Safety
 * `cache_` is a live cache handle; string arguments are NULL or
 * NUL-terminated; output pointers are NULL or writable.
 */
enum LastStatus last_train(const struct LastCache *cache_,
                           const char *config_json,
                           const char *run_id,
                           const char *out_dir,
                           struct LastSideNetwork **out_side,
                           char **out_log);

/**
 * Footprint report for one strategy (`full`, `bias_only`,
 * `entangled_lowrank`, `ladder_side`, `last`, `linear_probe`) on the
 * configuration's backbone, as JSON; free with [`last_string_free`].
 *
 * # Safety
 * `config_json` is NULL or NUL-terminated; `strategy` is NUL-terminated;
 * `out_json` is writable.
 */
enum LastStatus last_estimate_memory(const char *config_json,
                                     const char *strategy,
                                     char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAST_H */
