#ifndef STATEGUIDE_H
#define STATEGUIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_DIMENSION_MISMATCH = 3,
  SG_STATUS_IO = 4,
  SG_STATUS_FORMAT = 5,
  SG_STATUS_NUMERICAL = 6,
  SG_STATUS_MISSING_ACTIONS = 7,
  SG_STATUS_BOUND_VIOLATED = 8,
  SG_STATUS_PANIC = 9,
} SgStatus;

/**
 * Offline dataset handle.
 */
typedef struct SgDataset SgDataset;

/**
 * Environment specification handle.
 */
typedef struct SgEnv SgEnv;

/**
 * Pretrained state policy (or baseline) handle.
 */
typedef struct SgModel SgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sg_version(void);

/**
 * Message describing the last failed call on this thread (empty after a
 * success). Valid until the next `sg_*` call on the same thread.
 */
const char *sg_last_error(void);

/**
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SgStatus sg_env_new(const char *name, struct SgEnv **out);

/**
 * # Safety
 * `env` must come from `sg_env_new` and not be used afterwards. Null is ignored.
 */
void sg_env_free(struct SgEnv *env);

/**
 * # Safety
 * `env` must be a live handle or null (which yields 0).
 */
size_t sg_env_state_dim(const struct SgEnv *env);

/**
 * # Safety
 * `env` must be a live handle or null (which yields 0).
 */
size_t sg_env_action_dim(const struct SgEnv *env);

/**
 * # Safety
 * `env` must be a live handle or null (which yields 0).
 */
size_t sg_env_horizon(const struct SgEnv *env);

/**
 * Sample an initial state with the given seed into `state_out[state_len]`.
 *
 * # Safety
 * `env` must be live; `state_out` must hold `state_len` doubles.
 */
enum SgStatus sg_env_reset(const struct SgEnv *env,
                           uint64_t seed,
                           double *state_out,
                           size_t state_len);

/**
 * Advance one step. Actions outside the box are clipped.
 *
 * # Safety
 * `env` must be live; `state` and `next_out` hold `state_dim` doubles,
 * `action` holds `action_dim` doubles; `reward_out` and `terminal_out` are
 * valid pointers.
 */
enum SgStatus sg_env_step(const struct SgEnv *env,
                          const double *state,
                          const double *action,
                          double *next_out,
                          double *reward_out,
                          bool *terminal_out);

/**
 * Roll out a behaviour policy of `quality` ("random", "medium", "expert",
 * "mixture") for `n` transitions. `expert_actor_path` may be null only for
 * random data.
 *
 * # Safety
 * Strings must be NUL-terminated (or null where allowed); `out` must be valid.
 */
enum SgStatus sg_dataset_generate(const struct SgEnv *env,
                                  const char *quality,
                                  size_t n,
                                  uint64_t seed,
                                  const char *expert_actor_path,
                                  bool action_free,
                                  struct SgDataset **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid.
 */
enum SgStatus sg_dataset_load(const char *path, struct SgDataset **out);

/**
 * # Safety
 * `dataset` must be live; `path` NUL-terminated.
 */
enum SgStatus sg_dataset_save(const struct SgDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must come from this library and not be used afterwards. Null is ignored.
 */
void sg_dataset_free(struct SgDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (which yields 0).
 */
size_t sg_dataset_len(const struct SgDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (which yields 0).
 */
size_t sg_dataset_state_dim(const struct SgDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (which yields false).
 */
bool sg_dataset_is_action_free(const struct SgDataset *dataset);

/**
 * Pretrain on `dataset`. `config` is optional `key = value` text using the
 * keys of the `pretrain` command (`algo`, `steps`, `alpha`, `hidden`, ...);
 * the `data` key is ignored.
 *
 * # Safety
 * `dataset` must be live; `config` NUL-terminated or null; `out` valid.
 */
enum SgStatus sg_model_train(const struct SgDataset *dataset,
                             const char *config,
                             struct SgModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid.
 */
enum SgStatus sg_model_load(const char *path, struct SgModel **out);

/**
 * # Safety
 * `model` must be live; `path` NUL-terminated.
 */
enum SgStatus sg_model_save(const struct SgModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void sg_model_free(struct SgModel *model);

/**
 * # Safety
 * `model` must be a live handle or null (which yields 0).
 */
size_t sg_model_state_dim(const struct SgModel *model);

/**
 * Algorithm name of the model as a static string, or null for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
const char *sg_model_kind(const struct SgModel *model);

/**
 * Greedy state-difference code for `state`, written as values in
 * {-1, 0, +1} to `code_out[code_len]` (`code_len` equals the state dimension).
 * Only code-producing models (oso, decqn_n, bc_delta) are accepted.
 *
 * # Safety
 * `model` must be live; `state` holds `state_len` doubles and `code_out`
 * holds `code_len` bytes.
 */
enum SgStatus sg_model_greedy_code(const struct SgModel *model,
                                   const double *state,
                                   size_t state_len,
                                   int8_t *code_out,
                                   size_t code_len);

/**
 * Discretise the transition `state -> next` with per-dimension statistics
 * `mean`/`std` (all of length `dim`). `bins` is 2 or 3; `epsilon` is the
 * dead zone for 3 bins and ignored for 2.
 *
 * # Safety
 * All arrays must hold `dim` elements.
 */
enum SgStatus sg_discretise(const double *state,
                            const double *next,
                            const double *mean,
                            const double *std,
                            size_t dim,
                            double epsilon,
                            uint32_t bins,
                            int8_t *code_out);

/**
 * Run the discretisation-bound harness on the default increment MDP with
 * `dims` state dimensions. Per-k results go to the optional arrays
 * `gap_out`, `bound_out` (value-gap bound) and `eps_kl_out`, each of length `n_k`.
 * Returns `SG_STATUS_BOUND_VIOLATED` (outputs still written) if any check fails.
 *
 * # Safety
 * `k_list` holds `n_k` entries; non-null output arrays hold `n_k` doubles;
 * `slope_out` is valid or null.
 */
enum SgStatus sg_theory_check(size_t dims,
                              const size_t *k_list,
                              size_t n_k,
                              double gamma,
                              double sigma,
                              double *gap_out,
                              double *bound_out,
                              double *eps_kl_out,
                              double *slope_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STATEGUIDE_H */
