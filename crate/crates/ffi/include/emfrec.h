#ifndef EMFREC_H
#define EMFREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum EmfStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  EMF_STATUS_OK = 0,
  EMF_STATUS_NULL_POINTER = 1,
  EMF_STATUS_UTF8 = 2,
  EMF_STATUS_IO = 3,
  EMF_STATUS_PARSE = 4,
  EMF_STATUS_SCHEMA = 5,
  EMF_STATUS_FORMAT = 6,
  EMF_STATUS_SHAPE = 7,
  EMF_STATUS_CONFIG = 8,
  EMF_STATUS_SPLIT = 9,
  EMF_STATUS_INVALID = 10,
  EMF_STATUS_NUMERIC = 11,
  EMF_STATUS_JSON = 12,
  EMF_STATUS_PANIC = 13,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum EmfStatus EmfStatus;
#else
typedef int32_t EmfStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// Codes for the `int32_t` domain arguments.
enum EmfDomain
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  EMF_DOMAIN_X = 0,
  EMF_DOMAIN_Y = 1,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum EmfDomain EmfDomain;
#else
typedef int32_t EmfDomain;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// A loaded model with its catalog.
typedef struct EmfEngine EmfEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from this thread.
const char *emf_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void emf_string_free(char *s);

// Loads a checkpoint with the catalog in `data_dir/catalog.tsv` and the
// image and text embedding files (index files alongside, `<path>.idx`).
//
// # Safety
// String arguments must be valid NUL-terminated strings; `out` must be
// writable.
EmfStatus emf_engine_open(const char *checkpoint,
                          const char *data_dir,
                          const char *emb_img,
                          const char *emb_tex,
                          struct EmfEngine **out);

// # Safety
// `engine` must be null or a handle from [`emf_engine_open`], freed once.
void emf_engine_free(struct EmfEngine *engine);

// # Safety
// `engine` must be a live handle; `out` must be writable.
EmfStatus emf_engine_num_items(const struct EmfEngine *engine, int32_t domain, size_t *out);

// Catalog id of the item at `index`, as a new string.
//
// # Safety
// `engine` must be a live handle; `out` must be writable.
EmfStatus emf_engine_item_id(const struct EmfEngine *engine, size_t index, char **out);

// Ranks `target`-domain items for a history of catalog ids given oldest
// first. Writes up to `k` catalog indices and scores, best first, and the
// number written to `out_len`.
//
// # Safety
// `history` must hold `history_len` valid strings; `out_indices` and
// `out_scores` must have room for `k` entries.
EmfStatus emf_engine_recommend(const struct EmfEngine *engine,
                               const char *const *history,
                               size_t history_len,
                               int32_t target,
                               size_t k,
                               size_t *out_indices,
                               double *out_scores,
                               size_t *out_len);

// Reciprocal rank of candidate `truth` among `n` scores; ties favor the
// lower index.
//
// # Safety
// `scores` must hold `n` values; `out` must be writable.
EmfStatus emf_reciprocal_rank(const double *scores, size_t n, size_t truth, double *out);

// # Safety
// `scores` must hold `n` values; `out` must be writable.
EmfStatus emf_ndcg_at_k(const double *scores, size_t n, size_t truth, size_t k, double *out);

// The enrichment prompt for one item, as a new string.
//
// # Safety
// String arguments must be valid NUL-terminated strings; `out` must be
// writable.
EmfStatus emf_build_prompt(const char *item_id,
                           const char *domain_label,
                           const char *title,
                           char **out);

// Hex SHA-256 of the prompt template, as a new string.
//
// # Safety
// `out` must be writable.
EmfStatus emf_template_hash(char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMFREC_H */
