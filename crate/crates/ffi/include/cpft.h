#ifndef CPFT_H
#define CPFT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum CpftStatus {
  CPFT_STATUS_OK = 0,
  CPFT_STATUS_NULL_POINTER = 1,
  CPFT_STATUS_INVALID_ARGUMENT = 2,
  CPFT_STATUS_IO = 3,
  CPFT_STATUS_PARSE = 4,
  CPFT_STATUS_SHAPE = 5,
  CPFT_STATUS_DOMAIN = 6,
  CPFT_STATUS_TRAINING = 7,
  CPFT_STATUS_CHECKPOINT = 8,
  CPFT_STATUS_PANIC = 9,
} CpftStatus;

/**
 * A labeled dataset.
 */
typedef struct CpftDataset CpftDataset;

/**
 * An encoder checkpoint, with or without intent head.
 */
typedef struct CpftModel CpftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call on the same thread.
 */
const char *cpft_last_error(void);

/**
 * Loads a jsonl file or pairfile directory.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum CpftStatus cpft_dataset_load(const char *path, struct CpftDataset **out);

/**
 * Generates a synthetic dataset.
 *
 * # Safety
 * `out` must be writable.
 */
enum CpftStatus cpft_dataset_generate(size_t num_intents,
                                      size_t per_intent,
                                      double confusability,
                                      uint64_t seed,
                                      struct CpftDataset **out);

/**
 * # Safety
 * `ds` must come from this library; `out` must be writable.
 */
enum CpftStatus cpft_dataset_num_classes(const struct CpftDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` must come from this library; `out` must be writable.
 */
enum CpftStatus cpft_dataset_len(const struct CpftDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` must come from this library or be null; it is invalid afterwards.
 */
void cpft_dataset_free(struct CpftDataset *ds);

/**
 * Stage 1 on the train and validation text of `ds` with default settings
 * except `epochs` and `seed`.
 *
 * # Safety
 * `ds` must come from this library; `out` must be writable.
 */
enum CpftStatus cpft_pretrain(const struct CpftDataset *ds,
                              size_t epochs,
                              uint64_t seed,
                              struct CpftModel **out);

/**
 * Stage 2 on a `k`-shot sample of `ds`.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum CpftStatus cpft_finetune(const struct CpftModel *model,
                              const struct CpftDataset *ds,
                              size_t k,
                              size_t epochs,
                              double tau,
                              double lambda2,
                              uint64_t seed,
                              struct CpftModel **out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum CpftStatus cpft_model_load(const char *path, struct CpftModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a nul-terminated string.
 */
enum CpftStatus cpft_model_save(const struct CpftModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library or be null; it is invalid afterwards.
 */
void cpft_model_free(struct CpftModel *model);

/**
 * Intent index predicted for one utterance.
 *
 * # Safety
 * `model` must come from this library; `text` must be a nul-terminated
 * string; `out` must be writable.
 */
enum CpftStatus cpft_model_predict(const struct CpftModel *model, const char *text, size_t *out);

/**
 * Test-split accuracy.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum CpftStatus cpft_model_evaluate(const struct CpftModel *model,
                                    const struct CpftDataset *ds,
                                    double *out);

/**
 * In-batch contrastive loss of `n` anchors against `n` masked views, both
 * row-major `n × d`. Gradient buffers may be null.
 *
 * # Safety
 * Arrays must hold `n·d` values; `loss` must be writable.
 */
enum CpftStatus cpft_unsupervised_loss(const double *anchors,
                                       const double *views,
                                       size_t n,
                                       size_t d,
                                       double tau,
                                       double *loss,
                                       double *grad_anchors,
                                       double *grad_views);

/**
 * Supervised contrastive loss of `n` views (`n × d`) with per-view labels
 * and the utterance each view came from.
 *
 * # Safety
 * `views` must hold `n·d` values, `labels` and `view_of` `n` each; `loss`
 * must be writable; `grad` is null or holds `n·d` values.
 */
enum CpftStatus cpft_supervised_loss(const double *views,
                                     const size_t *labels,
                                     const size_t *view_of,
                                     size_t n,
                                     size_t d,
                                     double tau,
                                     double *loss,
                                     double *grad);

/**
 * MLM cross-entropy over `m` (row, target) pairs of a `rows × vocab` logit matrix.
 *
 * # Safety
 * `logits` must hold `rows·vocab` values, `rows_idx` and `targets` `m`
 * each; `loss` must be writable; `grad` is null or holds `rows·vocab` values.
 */
enum CpftStatus cpft_mlm_loss(const double *logits,
                              size_t rows,
                              size_t vocab,
                              const size_t *rows_idx,
                              const size_t *targets,
                              size_t m,
                              double *loss,
                              double *grad);

/**
 * Label-smoothed intent cross-entropy of `n × c` logits.
 *
 * # Safety
 * `logits` must hold `n·c` values and `labels` `n`; `loss` must be
 * writable; `grad` is null or holds `n·c` values.
 */
enum CpftStatus cpft_intent_loss(const double *logits,
                                 const size_t *labels,
                                 size_t n,
                                 size_t c,
                                 double epsilon,
                                 double *loss,
                                 double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPFT_H */
