#ifndef BRAINROT_H
#define BRAINROT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function in this interface.
 */
typedef enum BrStatus {
  BR_STATUS_OK = 0,
  BR_STATUS_IO = 1,
  BR_STATUS_FORMAT = 2,
  BR_STATUS_SHAPE = 3,
  BR_STATUS_INVALID_ARGUMENT = 4,
  BR_STATUS_CONFIG = 5,
  BR_STATUS_MISSING_ARTIFACT = 6,
  BR_STATUS_DIVERGENCE = 7,
  BR_STATUS_NULL_POINTER = 8,
  BR_STATUS_BUFFER_TOO_SMALL = 9,
  BR_STATUS_PANIC = 10,
} BrStatus;

/**
 * Opaque stage-2 regressor.
 */
typedef struct BrRegressor BrRegressor;

/**
 * Opaque frozen ViT encoder.
 */
typedef struct BrVit BrVit;

/**
 * Opaque intensity volume.
 */
typedef struct BrVolume BrVolume;

/**
 * Regression metrics. Undefined correlations are NaN.
 */
typedef struct BrMetrics {
  double mae;
  double rmse;
  double pearson_r;
  double spearman_rho;
  double r2;
  size_t n;
} BrMetrics;

/**
 * 2×2 association statistics with 95% confidence bounds.
 */
typedef struct BrAssociation {
  double odds_ratio;
  double or_lo;
  double or_hi;
  double relative_risk;
  double rr_lo;
  double rr_hi;
  double p_value;
  /**
   * 1 when the +0.5 zero-cell correction was applied.
   */
  int32_t corrected;
} BrAssociation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *br_version(void);

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t br_last_error_message(char *buf, size_t len);

/**
 * Loads a `.brv` volume.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum BrStatus br_volume_load(const char *path, struct BrVolume **out);

/**
 * Writes the volume's S, H, W into `dims`.
 *
 * # Safety
 * `vol` must come from [`br_volume_load`]; `dims` must hold 3 values.
 */
enum BrStatus br_volume_dims(const struct BrVolume *vol, size_t *dims);

/**
 * # Safety
 * `vol` must be null or come from [`br_volume_load`], and not be used afterwards.
 */
void br_volume_free(struct BrVolume *vol);

/**
 * Loads a ViT encoder archive.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum BrStatus br_vit_load(const char *path, struct BrVit **out);

/**
 * Embedding width d of the encoder.
 *
 * # Safety
 * `vit` must come from [`br_vit_load`].
 */
enum BrStatus br_vit_embed_dim(const struct BrVit *vit, size_t *out);

/**
 * # Safety
 * `vit` must be null or come from [`br_vit_load`], and not be used afterwards.
 */
void br_vit_free(struct BrVit *vit);

/**
 * Loads a regressor archive.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum BrStatus br_regressor_load(const char *path, struct BrRegressor **out);

/**
 * # Safety
 * `reg` must be null or come from [`br_regressor_load`], and not be used afterwards.
 */
void br_regressor_free(struct BrRegressor *reg);

/**
 * Encodes every sagittal slice into a row-major S×d matrix written to `buf`.
 * Fails with `BufferTooSmall` if `len < S·d`.
 *
 * # Safety
 * Handles must be valid; `buf` must point to `len` writable doubles.
 */
enum BrStatus br_feature_map(const struct BrVolume *vol,
                             const struct BrVit *vit,
                             double *buf,
                             size_t len);

/**
 * Predicts brain age from a row-major `rows×cols` embedding matrix.
 * `sigma2` (optional) receives the predicted variance, or NaN for MSE models.
 *
 * # Safety
 * `reg` must be valid and `z` must point to `rows·cols` doubles.
 */
enum BrStatus br_predict_features(const struct BrRegressor *reg,
                                  const double *z,
                                  size_t rows,
                                  size_t cols,
                                  uint8_t sex,
                                  double *age,
                                  double *sigma2);

/**
 * Full two-stage prediction for one volume, using the sex stored in its header.
 *
 * # Safety
 * All handles must be valid; `age` must be a valid pointer.
 */
enum BrStatus br_predict_volume(const struct BrVolume *vol,
                                const struct BrVit *vit,
                                const struct BrRegressor *reg,
                                double *age);

/**
 * MAE, RMSE, Pearson, Spearman and R² of `n` predictions.
 *
 * # Safety
 * `preds` and `targets` must point to `n` doubles; `out` must be valid.
 */
enum BrStatus br_compute_metrics(const double *preds,
                                 const double *targets,
                                 size_t n,
                                 struct BrMetrics *out);

/**
 * Odds ratio, relative risk and Fisher exact p for the table
 * (exposed-case, exposed-control, unexposed-case, unexposed-control).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BrStatus br_association(uint64_t a,
                             uint64_t b,
                             uint64_t c,
                             uint64_t d,
                             struct BrAssociation *out);

/**
 * Runs a pipeline subcommand (`"synth"`, `"train"`, `"pipeline"`, ...).
 * `config_path` and `out_dir` may be null; `out_dir` overrides `io.out`.
 *
 * # Safety
 * Non-null pointers must be valid C strings.
 */
enum BrStatus br_run_stage(const char *stage, const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAINROT_H */
