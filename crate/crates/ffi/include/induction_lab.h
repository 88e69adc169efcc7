#ifndef INDUCTION_LAB_H
#define INDUCTION_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum LabStatus {
  LAB_STATUS_OK = 0,
  LAB_STATUS_NULL_POINTER = 1,
  LAB_STATUS_INVALID_ARGUMENT = 2,
  LAB_STATUS_INVALID_CONFIG = 3,
  LAB_STATUS_IO = 4,
  LAB_STATUS_PARSE = 5,
  LAB_STATUS_RESOURCE = 6,
  LAB_STATUS_PANIC = 7,
} LabStatus;

typedef enum LabMechanism {
  LAB_MECHANISM_POSITIONAL = 0,
  LAB_MECHANISM_INDUCTION = 1,
} LabMechanism;

/**
 * Opaque length distribution.
 */
typedef struct LabDistribution LabDistribution;

/**
 * Opaque trained or loaded model.
 */
typedef struct LabModel LabModel;

typedef struct LabTrainOptions {
  double eta_v;
  double eta_kq;
  size_t m_v;
  size_t m_kq;
  uint64_t seed;
  bool reuse_samples;
} LabTrainOptions;

typedef struct LabDims {
  size_t n;
  size_t n_trg;
  size_t l;
  size_t d;
} LabDims;

typedef struct LabProbe {
  double induction_strength;
  double max_positional_strength;
  enum LabMechanism dominant;
} LabProbe;

typedef struct LabMetrics {
  double ood_accuracy;
  double pseudo_rate;
  double leftmost_rate;
  size_t n_samples;
} LabMetrics;

/**
 * Certifier verdict. `witness_ell1` and `witness_ell2` are 0 when there is no witness.
 */
typedef struct LabCertificate {
  bool generalizes;
  bool factor_two;
  double margin;
  size_t witness_ell1;
  size_t witness_ell2;
  size_t pairs_checked;
  size_t failing_pairs;
  double max_sum_ratio;
  double max_sum_ratio_t;
} LabCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lab_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the length needed including the NUL, or 0 when
 * there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t lab_last_error_message(char *buf, size_t len);

/**
 * Distribution with the given support and masses (masses sum to 1).
 *
 * # Safety
 * `support` and `masses` must point to `len` readable elements; `out_dist` must be writable.
 */
enum LabStatus lab_distribution_new(const size_t *support,
                                    const double *masses,
                                    size_t len,
                                    struct LabDistribution **out_dist);

/**
 * Uniform distribution on `lo..=hi`.
 *
 * # Safety
 * `out_dist` must be writable.
 */
enum LabStatus lab_distribution_uniform(size_t lo, size_t hi, struct LabDistribution **out_dist);

/**
 * Minimum-cost distribution with max-sum ratio `1 / n_trg` on horizon `u`.
 *
 * # Safety
 * `out_dist` must be writable.
 */
enum LabStatus lab_distribution_optimal(size_t n_trg, size_t u, struct LabDistribution **out_dist);

/**
 * # Safety
 * `dist` must be null or a handle from this library not yet freed.
 */
void lab_distribution_free(struct LabDistribution *dist);

/**
 * # Safety
 * `dist` must be a live handle and `out_ratio` writable.
 */
enum LabStatus lab_distribution_max_sum_ratio(const struct LabDistribution *dist,
                                              double *out_ratio);

/**
 * Default training options.
 */
struct LabTrainOptions lab_train_options_default(void);

/**
 * Runs the two-stage one-step training. `options` may be null for defaults.
 *
 * # Safety
 * `dist` must be a live handle, `options` null or readable, `out_model` writable.
 */
enum LabStatus lab_model_train(size_t n,
                               size_t n_trg,
                               size_t l,
                               const struct LabDistribution *dist,
                               const struct LabTrainOptions *options,
                               struct LabModel **out_model);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` writable.
 */
enum LabStatus lab_model_load(const char *path, struct LabModel **out_model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum LabStatus lab_model_save(const struct LabModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void lab_model_free(struct LabModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out_dims` writable.
 */
enum LabStatus lab_model_dims(const struct LabModel *model, struct LabDims *out_dims);

/**
 * Predicts the token after `tokens[0..len]` (1-indexed ids, query last).
 *
 * # Safety
 * `model` must be a live handle, `tokens` readable for `len`, `out_token` writable.
 */
enum LabStatus lab_model_predict(const struct LabModel *model,
                                 const size_t *tokens,
                                 size_t len,
                                 size_t *out_token);

/**
 * Induction versus positional-shortcut strength of `W_KQ` over `dist`'s support.
 *
 * # Safety
 * `model` and `dist` must be live handles and `out_probe` writable.
 */
enum LabStatus lab_model_probe(const struct LabModel *model,
                               const struct LabDistribution *dist,
                               struct LabProbe *out_probe);

/**
 * OOD accuracy, pseudo rate and leftmost rate over `n` sequences.
 *
 * # Safety
 * `model` must be a live handle and `out_metrics` writable.
 */
enum LabStatus lab_model_eval_ood(const struct LabModel *model,
                                  size_t ell_min,
                                  size_t ell_max,
                                  size_t n,
                                  uint64_t seed,
                                  struct LabMetrics *out_metrics);

/**
 * Certifies OOD generalization of the population-limit model trained on `dist`.
 *
 * # Safety
 * `dist` must be a live handle and `out_cert` writable.
 */
enum LabStatus lab_certify(size_t n,
                           size_t n_trg,
                           size_t l,
                           const struct LabDistribution *dist,
                           struct LabCertificate *out_cert);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INDUCTION_LAB_H */
