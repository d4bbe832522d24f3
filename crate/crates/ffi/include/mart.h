#ifndef MART_H
#define MART_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MartStatus {
  MART_STATUS_OK = 0,
  // Invalid argument or configuration.
  MART_STATUS_USAGE = 1,
  // Unreadable or malformed data.
  MART_STATUS_DATA = 2,
  // Non-finite values or an undefined result.
  MART_STATUS_NUMERIC = 3,
  // A required pointer was null.
  MART_STATUS_NULL_POINTER = 4,
  // An index was out of range.
  MART_STATUS_OUT_OF_RANGE = 5,
  // The library panicked; the handle involved should be freed.
  MART_STATUS_PANIC = 6,
} MartStatus;

// Loaded training checkpoint.
typedef struct MartCheckpoint MartCheckpoint;

// Identified embedding rows.
typedef struct MartEmbeddings MartEmbeddings;

// Crop tree.
typedef struct MartTree MartTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *mart_last_error(void);

// Builds an `m`-ary tree of `n` levels over `root_len` samples.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum MartStatus mart_tree_build(size_t root_len, size_t m, size_t n, struct MartTree **out);

// Releases a tree. Null is ignored.
//
// # Safety
// `tree` must come from [`mart_tree_build`] and not have been freed.
void mart_tree_free(struct MartTree *tree);

// Total node count, or 0 for a null handle.
//
// # Safety
// `tree` must be null or a live handle.
size_t mart_tree_node_count(const struct MartTree *tree);

// Half-open sample span of node `index` at `level`.
//
// # Safety
// `tree` must be a live handle; `start` and `end` must be writable.
enum MartStatus mart_tree_span(const struct MartTree *tree,
                               size_t level,
                               size_t index,
                               size_t *start,
                               size_t *end);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MartStatus mart_checkpoint_load(const char *path, struct MartCheckpoint **out);

// Releases a checkpoint. Null is ignored.
//
// # Safety
// `ck` must come from [`mart_checkpoint_load`] and not have been freed.
void mart_checkpoint_free(struct MartCheckpoint *ck);

// Embedding width of a checkpoint, or 0 for a null handle.
//
// # Safety
// `ck` must be null or a live handle.
size_t mart_checkpoint_embedding_dim(const struct MartCheckpoint *ck);

// Embeds one mono track into `out`, which holds `out_len` floats and must
// be at least [`mart_checkpoint_embedding_dim`] long.
//
// # Safety
// `samples` must point to `len` floats and `out` to `out_len` writable floats.
enum MartStatus mart_embed(const struct MartCheckpoint *ck,
                           const float *samples,
                           size_t len,
                           uint32_t sample_rate,
                           float *out,
                           size_t out_len);

// Reads an embeddings file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MartStatus mart_embeddings_read(const char *path, struct MartEmbeddings **out);

// Releases an embedding set. Null is ignored.
//
// # Safety
// `set` must come from [`mart_embeddings_read`] and not have been freed.
void mart_embeddings_free(struct MartEmbeddings *set);

// Row count, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t mart_embeddings_len(const struct MartEmbeddings *set);

// Row width, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t mart_embeddings_dim(const struct MartEmbeddings *set);

// Copies row `i` into `out`, which holds `out_len` floats.
//
// # Safety
// `set` must be a live handle and `out` must point to `out_len` writable floats.
enum MartStatus mart_embeddings_row(const struct MartEmbeddings *set,
                                    size_t i,
                                    float *out,
                                    size_t out_len);

// ROC-AUC of `n` scores against 0/1 labels (any nonzero byte is positive).
//
// # Safety
// `scores` and `labels` must point to `n` elements; `out` must be writable.
enum MartStatus mart_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MART_H */
