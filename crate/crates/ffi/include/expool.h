#ifndef EXPOOL_H
#define EXPOOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum expool_status {
  EXPOOL_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or an out-of-range enum value.
   */
  EXPOOL_STATUS_INVALID_ARGUMENT = 1,
  EXPOOL_STATUS_INVALID_INPUT = 2,
  EXPOOL_STATUS_NOT_FOUND = 3,
  EXPOOL_STATUS_IO = 4,
  EXPOOL_STATUS_PARSE = 5,
  EXPOOL_STATUS_NUMERICAL = 6,
  EXPOOL_STATUS_ORACLE_UNAVAILABLE = 7,
  EXPOOL_STATUS_ORACLE_PROTOCOL = 8,
  EXPOOL_STATUS_CONFIG = 9,
  EXPOOL_STATUS_PANIC = 10,
} expool_status;

typedef enum expool_preference {
  EXPOOL_PREFERENCE_FIDELITY = 0,
  EXPOOL_PREFERENCE_PERCEPTION = 1,
} expool_preference;

/**
 * Experience pool.
 */
typedef struct expool_pool expool_pool;

/**
 * Simulated environment.
 */
typedef struct expool_world expool_world;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *expool_last_error(void);

/**
 * Library version as a static string.
 */
const char *expool_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void expool_string_free(char *s);

/**
 * Canonical `+`-joined key of a degradation set.
 *
 * # Safety
 * `ids` must point to `n` valid C strings; `out` must be writable.
 */
enum expool_status expool_canonical_key(const char *const *ids, size_t n, char **out);

/**
 * Spearman's ρ between two rankings given best first.
 *
 * # Safety
 * `a`/`b` must point to `na`/`nb` valid C strings; `out` must be writable.
 */
enum expool_status expool_spearman(const char *const *a,
                                   size_t na,
                                   const char *const *b,
                                   size_t nb,
                                   double *out);

/**
 * Fits abilities and tie intensity to pairwise counts. `wins[i*k + j]` is
 * how often i beat j; `ties` is symmetric. Writes `k` abilities to `theta`
 * and the tie intensity to `nu`.
 *
 * # Safety
 * `wins` and `ties` must hold `k*k` values; `theta` room for `k`.
 */
enum expool_status expool_btd_fit(size_t k,
                                  const uint64_t *wins,
                                  const uint64_t *ties,
                                  double *theta,
                                  double *nu,
                                  bool *converged);

/**
 * Creates a world from a preset name (`group-a`, `dominant`, ...).
 *
 * # Safety
 * `name` must be a valid C string; `out` must be writable.
 */
enum expool_status expool_world_preset(const char *name, uint64_t seed, struct expool_world **out);

/**
 * Loads a world spec file.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum expool_status expool_world_load(const char *path, struct expool_world **out);

/**
 * # Safety
 * `world` must come from this library and not have been freed. Null is ignored.
 */
void expool_world_free(struct expool_world *world);

/**
 * Generates `n` images from the world's mixture; writes their ids as a
 * JSON array.
 *
 * # Safety
 * `world` must be a live handle; `prefix` a valid C string; `out_json` writable.
 */
enum expool_status expool_world_generate(const struct expool_world *world,
                                         const char *prefix,
                                         size_t n,
                                         char **out_json);

/**
 * Creates an empty pool.
 *
 * # Safety
 * `out` must be writable.
 */
enum expool_status expool_pool_new(struct expool_pool **out);

/**
 * Loads a pool directory.
 *
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum expool_status expool_pool_load(const char *dir, struct expool_pool **out);

/**
 * Saves a pool directory atomically.
 *
 * # Safety
 * `pool` must be a live handle; `dir` a valid C string.
 */
enum expool_status expool_pool_save(const struct expool_pool *pool, const char *dir);

/**
 * # Safety
 * `pool` must come from this library and not have been freed. Null is ignored.
 */
void expool_pool_free(struct expool_pool *pool);

/**
 * Acquires and evolves on the given images with the simulated oracles;
 * writes the round reports as JSON. `preference` is an `expool_preference`.
 *
 * # Safety
 * Handles must be live; `image_ids` must point to `n` valid C strings.
 */
enum expool_status expool_pool_train(struct expool_pool *pool,
                                     const struct expool_world *world,
                                     const char *const *image_ids,
                                     size_t n,
                                     uint32_t preference,
                                     char **out_json);

/**
 * Runs the inference workflow on one image with fine-grained guidance and
 * the default budgets; writes the trace as JSON. `preference` is an
 * `expool_preference`.
 *
 * # Safety
 * Handles must be live; `image_id` must be a valid C string.
 */
enum expool_status expool_infer(const struct expool_world *world,
                                const struct expool_pool *pool,
                                const char *image_id,
                                uint32_t preference,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXPOOL_H */
