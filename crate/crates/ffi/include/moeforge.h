#ifndef MOEFORGE_H
#define MOEFORGE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfDtype {
  MF_DTYPE_FP8_E4M3 = 0,
  MF_DTYPE_BF16 = 1,
  MF_DTYPE_FP32 = 2,
} MfDtype;

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_ARGUMENT = 1,
  MF_STATUS_INVALID_UTF8 = 2,
  MF_STATUS_INVALID = 3,
  MF_STATUS_FORMAT = 4,
  MF_STATUS_IO = 5,
  MF_STATUS_PANIC = 6,
} MfStatus;

/**
 * An in-memory flat checkpoint.
 */
typedef struct MfCheckpoint MfCheckpoint;

/**
 * A layout plan.
 */
typedef struct MfPlan MfPlan;

typedef struct MfSimSummary {
  bool completed;
  size_t steps;
  size_t blocked_ranks;
  size_t never_arrives;
} MfSimSummary;

typedef struct MfBinaryMetrics {
  double acc;
  double bacc;
  double pos_acc;
  double pos_prec;
  double neg_acc;
  double neg_prec;
  double pos_f1;
  double neg_f1;
  double defect_rate;
  double model_defect_rate;
} MfBinaryMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *mf_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mf_string_free(char *s);

float mf_fp8_decode(uint8_t code);

/**
 * # Safety
 * `out` must be writable.
 */
enum MfStatus mf_fp8_encode(float value, uint8_t *out);

uint16_t mf_bf16_encode(float value);

float mf_bf16_decode(uint16_t bits);

/**
 * # Safety
 * `out` must be writable.
 */
enum MfStatus mf_plan_new(size_t num_layers,
                          size_t num_dense_layers,
                          size_t num_routed_experts,
                          bool has_shared_expert,
                          size_t pp,
                          size_t width,
                          struct MfPlan **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum MfStatus mf_plan_from_json(const char *json, struct MfPlan **out);

/**
 * # Safety
 * `plan` must be a live handle and `out` writable.
 */
enum MfStatus mf_plan_to_json(const struct MfPlan *plan, char **out);

/**
 * Total rank count, or 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t mf_plan_total_ranks(const struct MfPlan *plan);

/**
 * # Safety
 * `plan` must be null or a handle not yet freed.
 */
void mf_plan_free(struct MfPlan *plan);

/**
 * Simulates one optimizer step. A deadlock is reported through the summary,
 * not the status.
 *
 * # Safety
 * `plan` must be a live handle and `out` writable.
 */
enum MfStatus mf_plan_simulate(const struct MfPlan *plan, bool stub, struct MfSimSummary *out);

/**
 * Human-readable simulation report.
 *
 * # Safety
 * `plan` must be a live handle and `out` writable.
 */
enum MfStatus mf_plan_explain(const struct MfPlan *plan, bool stub, char **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MfStatus mf_checkpoint_read(const char *path, struct MfCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be a live handle and `path` a NUL-terminated string.
 */
enum MfStatus mf_checkpoint_write(const struct MfCheckpoint *ckpt, const char *path);

/**
 * # Safety
 * `ckpt` must be a live handle and `out` writable.
 */
enum MfStatus mf_checkpoint_cast(const struct MfCheckpoint *ckpt,
                                 enum MfDtype dtype,
                                 struct MfCheckpoint **out);

/**
 * Number of tensors, or 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t mf_checkpoint_len(const struct MfCheckpoint *ckpt);

/**
 * # Safety
 * `a` and `b` must be live handles.
 */
bool mf_checkpoint_equal(const struct MfCheckpoint *a, const struct MfCheckpoint *b);

/**
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void mf_checkpoint_free(struct MfCheckpoint *ckpt);

/**
 * Shards `ckpt` per `plan` and writes the shard files and manifest to `dir`.
 *
 * # Safety
 * Handles must be live and `dir` a NUL-terminated string.
 */
enum MfStatus mf_shard_to_dir(const struct MfCheckpoint *ckpt,
                              const struct MfPlan *plan,
                              const char *dir);

/**
 * Reads a shard directory (or its manifest) and merges it to `dtype`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum MfStatus mf_merge_from_dir(const char *dir, enum MfDtype dtype, struct MfCheckpoint **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum MfStatus mf_instance_weight(double delta,
                                 double beta,
                                 double w_min,
                                 double w_max,
                                 double *out);

/**
 * Task weights for `n` tasks; `out[i]` pairs with `metrics[i]`.
 *
 * # Safety
 * `metrics` must hold `n` readable values and `out` `n` writable ones.
 */
enum MfStatus mf_task_weights(const double *metrics, size_t n, double alpha, double *out);

/**
 * Unrounded metrics in percent from confusion counts.
 *
 * # Safety
 * `out` must be writable.
 */
enum MfStatus mf_binary_metrics(uint64_t tp,
                                uint64_t fp,
                                uint64_t tn,
                                uint64_t fn_,
                                struct MfBinaryMetrics *out);

/**
 * ROC AUC in [0, 1] of `n` scores with their positive-class flags.
 *
 * # Safety
 * `scores` and `positive` must hold `n` readable values; `out` writable.
 */
enum MfStatus mf_auc(const double *scores, const bool *positive, size_t n, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum MfStatus mf_cost_per_million(double gpu_cost_per_second,
                                  double tokens_per_second,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOEFORGE_H */
