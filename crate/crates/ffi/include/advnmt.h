/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef ADVNMT_H
#define ADVNMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AnmtStatus {
  ANMT_STATUS_OK = 0,
  ANMT_STATUS_NULL_ARGUMENT = 1,
  ANMT_STATUS_INVALID_ARGUMENT = 2,
  ANMT_STATUS_IO = 3,
  ANMT_STATUS_CHECKPOINT = 4,
  ANMT_STATUS_DIM_MISMATCH = 5,
  ANMT_STATUS_TOKEN_OUT_OF_RANGE = 6,
  ANMT_STATUS_BUFFER_TOO_SMALL = 7,
  ANMT_STATUS_PANIC = 8,
  ANMT_STATUS_INTERNAL = 9,
} AnmtStatus;

/**
 * Opaque adversary handle.
 */
typedef struct AnmtAdversary AnmtAdversary;

/**
 * Opaque generator handle.
 */
typedef struct AnmtGenerator AnmtGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *anmt_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *anmt_version(void);

/**
 * Freshly initialized generator.
 *
 * # Safety
 * `out_handle` must be valid for a pointer write.
 */
enum AnmtStatus anmt_generator_new(size_t src_vocab,
                                   size_t tgt_vocab,
                                   size_t emb_dim,
                                   size_t hidden_dim,
                                   uint64_t seed,
                                   struct AnmtGenerator **out_handle);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_handle` valid for writes.
 */
enum AnmtStatus anmt_generator_load(const char *path, struct AnmtGenerator **out_handle);

/**
 * # Safety
 * `handle` must come from this library; `path` must be NUL-terminated.
 */
enum AnmtStatus anmt_generator_save(const struct AnmtGenerator *handle, const char *path);

/**
 * Releases a generator. Null is a no-op.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void anmt_generator_free(struct AnmtGenerator *handle);

/**
 * `log G(target | source)`; the target is scored as given (append EOS to
 * score a complete sentence).
 *
 * # Safety
 * Token pointers must reference `*_len` readable ids; `out_log_prob` must
 * be valid for writes.
 */
enum AnmtStatus anmt_generator_score(const struct AnmtGenerator *handle,
                                     const uint32_t *source,
                                     size_t source_len,
                                     const uint32_t *target,
                                     size_t target_len,
                                     double *out_log_prob);

/**
 * Beam-decodes `source` (greedy for `beam == 1`). Writes the output ids,
 * ending in EOS when finished, into `out_tokens`.
 *
 * `*out_len` always receives the output length. If it exceeds `capacity`
 * nothing is copied and `ANMT_STATUS_BUFFER_TOO_SMALL` is returned, so callers
 * can retry with a larger buffer.
 *
 * # Safety
 * `out_tokens` must hold `capacity` writable ids (may be null when
 * `capacity == 0`); `out_len` must be valid; `out_score` may be null.
 */
enum AnmtStatus anmt_generator_translate(const struct AnmtGenerator *handle,
                                         const uint32_t *source,
                                         size_t source_len,
                                         size_t beam,
                                         size_t max_len,
                                         uint32_t *out_tokens,
                                         size_t capacity,
                                         size_t *out_len,
                                         double *out_score);

/**
 * # Safety
 * `path` must be NUL-terminated; `out_handle` valid for writes.
 */
enum AnmtStatus anmt_adversary_load(const char *path, struct AnmtAdversary **out_handle);

/**
 * Releases an adversary. Null is a no-op.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void anmt_adversary_free(struct AnmtAdversary *handle);

/**
 * Eval-mode probability that `(source, target)` is a human translation.
 *
 * # Safety
 * Token pointers must reference `*_len` readable ids; `out_prob` must be
 * valid for writes.
 */
enum AnmtStatus anmt_adversary_score(const struct AnmtAdversary *handle,
                                     const uint32_t *source,
                                     size_t source_len,
                                     const uint32_t *target,
                                     size_t target_len,
                                     double *out_prob);

/**
 * Unsmoothed 4-gram corpus BLEU (percent) over `count` sentence pairs of
 * token ids.
 *
 * # Safety
 * `hyps`/`refs` must point to `count` id arrays whose lengths are given by
 * `hyp_lens`/`ref_lens`; `out_bleu` must be valid for writes.
 */
enum AnmtStatus anmt_corpus_bleu(const uint32_t *const *hyps,
                                 const size_t *hyp_lens,
                                 const uint32_t *const *refs,
                                 const size_t *ref_lens,
                                 size_t count,
                                 double *out_bleu);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVNMT_H */
