/* C interface for prmkit. All functions are thread-safe; error details
 * for the most recent failure on the calling thread come from
 * prmkit_last_error(). */

#ifndef PRMKIT_H
#define PRMKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define PRMKIT_OK 0

/**
 * The search ran to completion without reaching any terminal state.
 */
#define PRMKIT_NO_TERMINAL 1

/**
 * A required pointer argument was null.
 */
#define PRMKIT_ERR_NULL_ARGUMENT -1

/**
 * A string argument was not valid UTF-8.
 */
#define PRMKIT_ERR_INVALID_UTF8 -2

/**
 * An argument was out of range or otherwise unusable.
 */
#define PRMKIT_ERR_INVALID_ARGUMENT -3

/**
 * A core-library validation or processing step failed.
 */
#define PRMKIT_ERR_DOMAIN -4

/**
 * An internal panic was caught at the boundary.
 */
#define PRMKIT_ERR_PANIC -5

/**
 * How a reward vector is collapsed to one chain score.
 */
typedef enum PrmkitAgg {
  PrmkitAgg_Min = 0,
  PrmkitAgg_Last = 1,
  PrmkitAgg_Avg = 2,
} PrmkitAgg;

/**
 * Which guided-search procedure to run.
 */
typedef enum PrmkitSearchMethod {
  PrmkitSearchMethod_Beam = 0,
  PrmkitSearchMethod_Mcts = 1,
} PrmkitSearchMethod;

/**
 * How one answer is picked from a candidate pool.
 */
typedef enum PrmkitSelector {
  PrmkitSelector_Mv = 0,
  PrmkitSelector_Wmv = 1,
  PrmkitSelector_Bon = 2,
} PrmkitSelector;

/**
 * A per-question candidate pool under construction.
 */
typedef struct PrmkitPool PrmkitPool;

/**
 * A deterministic mock world serving questions, steps, and step scores.
 */
typedef struct PrmkitWorld PrmkitWorld;

/**
 * Outcome of one guided search over a mock-world question.
 */
typedef struct PrmkitSearchSummary {
  /**
   * Final answer letter ('A'..'J'), or 0 when no terminal was found.
   */
  char answer;
  /**
   * Whether the answer matches the world's designated truth.
   */
  bool correct;
  /**
   * Aggregated score of the returned chain.
   */
  double score;
  /**
   * Candidate step generations consumed.
   */
  uint64_t generation_units;
  /**
   * Steps in the returned chain.
   */
  uintptr_t steps;
} PrmkitSearchSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static string.
 */
const char *prmkit_version(void);

/**
 * Returns the calling thread's most recent error message (empty if none).
 * The pointer stays valid until this thread's next prmkit call.
 */
const char *prmkit_last_error(void);

/**
 * Collapses `len` step scores into one chain score under `agg`.
 *
 * # Safety
 * `scores` must point to `len` readable doubles; `out` must be writable.
 */
int32_t prmkit_aggregate(const double *scores, uintptr_t len, enum PrmkitAgg agg, double *out);

/**
 * Creates an empty candidate pool for one question. Returns null on failure.
 *
 * # Safety
 * `question_id` must be a NUL-terminated string.
 */
struct PrmkitPool *prmkit_pool_new(const char *question_id);

/**
 * Adds one candidate chain to the pool.
 *
 * `cot_text` is a full chain: steps separated by blank lines, the last step
 * declaring "the answer is (X)". Pass null `scores` for an unscored
 * candidate (usable by MV only); otherwise `scores_len` must equal the
 * chain's step count.
 *
 * # Safety
 * `pool` must come from [`prmkit_pool_new`]; `cot_text` must be
 * NUL-terminated; `scores` must be null or point to `scores_len` doubles.
 */
int32_t prmkit_pool_push(struct PrmkitPool *pool,
                         const char *cot_text,
                         const double *scores,
                         uintptr_t scores_len);

/**
 * Returns the number of candidates pushed so far (0 for null).
 *
 * # Safety
 * `pool` must be null or come from [`prmkit_pool_new`].
 */
uintptr_t prmkit_pool_len(const struct PrmkitPool *pool);

/**
 * Picks one answer letter from the pool and writes it to `out_letter`.
 *
 * # Safety
 * `pool` must come from [`prmkit_pool_new`]; `out_letter` must be writable.
 */
int32_t prmkit_pool_select(const struct PrmkitPool *pool,
                           enum PrmkitSelector selector,
                           enum PrmkitAgg agg,
                           char *out_letter);

/**
 * Frees a pool. Null is a no-op.
 *
 * # Safety
 * `pool` must be null or an unfreed pointer from [`prmkit_pool_new`].
 */
void prmkit_pool_free(struct PrmkitPool *pool);

/**
 * Creates a mock world. Returns null if any parameter is out of range.
 *
 * `branching` children per node, terminals at `depth`, a `density`
 * fraction of terminals designated correct (0 < density <= 1), and
 * step scores jittered by up to `noise` (0 <= noise <= 0.5).
 */
struct PrmkitWorld *prmkit_world_new(uint64_t seed,
                                     uintptr_t branching,
                                     uintptr_t depth,
                                     double density,
                                     double noise);

/**
 * Runs a guided search over the world's question `question_id`.
 *
 * Returns `PRMKIT_OK` when a terminal chain was found and summarized,
 * `PRMKIT_NO_TERMINAL` (with a zeroed summary) when the search exhausted
 * its budget without reaching a terminal, or a negative error code.
 *
 * # Safety
 * `world` must come from [`prmkit_world_new`]; `question_id` must be
 * NUL-terminated; `out` must be writable.
 */
int32_t prmkit_world_search(const struct PrmkitWorld *world,
                            const char *question_id,
                            enum PrmkitSearchMethod method,
                            enum PrmkitAgg agg,
                            struct PrmkitSearchSummary *out);

/**
 * Frees a world. Null is a no-op.
 *
 * # Safety
 * `world` must be null or an unfreed pointer from [`prmkit_world_new`].
 */
void prmkit_world_free(struct PrmkitWorld *world);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRMKIT_H */
