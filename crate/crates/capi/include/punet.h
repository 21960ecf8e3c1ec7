#ifndef PUNET_H
#define PUNET_H

/* Generated by cbindgen from the punet-capi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared with the CLI's exit codes (2-7); codes from 64 up are
 * conditions only the C boundary can produce.
 */
typedef enum PunetStatus {
  PUNET_STATUS_OK = 0,
  /**
   * Invalid configuration value or combination.
   */
  PUNET_STATUS_CONFIG = 2,
  /**
   * Input data is unusable (too few samples, mismatched series, ...).
   */
  PUNET_STATUS_DATA = 3,
  /**
   * File could not be read or written.
   */
  PUNET_STATUS_IO = 4,
  /**
   * File exists but does not parse.
   */
  PUNET_STATUS_FORMAT = 5,
  /**
   * Array or tensor sizes disagree.
   */
  PUNET_STATUS_SHAPE = 6,
  /**
   * Numerical failure (non-finite value, failed factorization, ...).
   */
  PUNET_STATUS_NUMERIC = 7,
  /**
   * A required pointer argument was null.
   */
  PUNET_STATUS_NULL_ARGUMENT = 64,
  /**
   * A string argument was not valid UTF-8.
   */
  PUNET_STATUS_UTF8 = 65,
  /**
   * An internal panic was caught at the boundary.
   */
  PUNET_STATUS_PANIC = 66,
} PunetStatus;

/**
 * A trained run loaded into memory; create with [`punet_model_load`] and
 * release with [`punet_model_free`].
 */
typedef struct PunetModel PunetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *punet_version(void);

/**
 * Message for the most recent failure on the calling thread. Never null;
 * empty when no failure has occurred. The pointer is valid until the next
 * failing call on the same thread.
 */
const char *punet_last_error(void);

/**
 * Generates a synthetic multi-rater corpus described by the TOML file at
 * `config_path` into `out_dir`. A null `config_path` uses the built-in
 * default corpus settings.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings or null.
 */
enum PunetStatus punet_generate_data(const char *config_path, const char *out_dir);

/**
 * Trains the experiment described by the TOML file at `config_path` and
 * writes checkpoints, logs, and the resolved config into `run_dir`. The
 * config's `dataset` entry must point at a generated corpus.
 *
 * # Safety
 * Both path arguments must be NUL-terminated strings or null.
 */
enum PunetStatus punet_train(const char *config_path, const char *run_dir, bool verbose);

/**
 * Evaluates a trained run on its test split, writing `eval.csv` and
 * `summary.json` into `run_dir`. `n_samples` of 0 keeps the config's
 * setting. The median test score is written through `median_score` when it
 * is non-null.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string or null; `median_score` must be
 * null or valid for one f64 write.
 */
enum PunetStatus punet_evaluate(const char *run_dir, size_t n_samples, double *median_score);

/**
 * Loads a trained run (resolved config plus checkpoints) from `run_dir`
 * and stores the handle through `out_model`.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string or null; `out_model` must be
 * valid for one pointer write.
 */
enum PunetStatus punet_model_load(const char *run_dir, struct PunetModel **out_model);

/**
 * Square image edge the model was trained on, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a handle from [`punet_model_load`] or null.
 */
size_t punet_model_image_size(const struct PunetModel *model);

/**
 * Number of masks a prediction request for `n_samples` returns: sampling
 * families honor `n_samples`, the plain U-Net returns 1, and an ensemble
 * returns one mask per member. Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be a handle from [`punet_model_load`] or null.
 */
size_t punet_model_mask_count(const struct PunetModel *model, size_t n_samples);

/**
 * Draws segmentation masks for one raw image of `image_len` row-major
 * pixels in `[0, 1]` (normalization is applied internally). Masks are
 * written mask-major into `masks_out` as 0/1 bytes, `image_len` bytes per
 * mask; `capacity` is the buffer size in bytes. The number of masks written
 * is stored through `n_masks_out` when it is non-null.
 *
 * # Safety
 * `model` must come from [`punet_model_load`]; `image` must hold
 * `image_len` doubles; `masks_out` must hold `capacity` writable bytes.
 */
enum PunetStatus punet_model_predict(struct PunetModel *model,
                                     const double *image,
                                     size_t image_len,
                                     size_t n_samples,
                                     uint64_t seed,
                                     uint8_t *masks_out,
                                     size_t capacity,
                                     size_t *n_masks_out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be a handle from [`punet_model_load`] or null, and must not
 * be used afterwards.
 */
void punet_model_free(struct PunetModel *model);

/**
 * Generalized energy distance between a prediction set and a reference set
 * of binary masks, with its decomposition. `preds` holds `n_pred` masks of
 * `pixels` bytes each (nonzero means foreground), `labels` likewise;
 * `n_pred` must be at least 2 and `n_label` at least 1. Each out-pointer
 * may be null.
 *
 * # Safety
 * The mask buffers must hold `n_pred * pixels` and `n_label * pixels`
 * bytes; each non-null out-pointer must be valid for one f64 write.
 */
enum PunetStatus punet_ged(const uint8_t *preds,
                           size_t n_pred,
                           const uint8_t *labels,
                           size_t n_label,
                           size_t pixels,
                           double *ged_squared,
                           double *cross,
                           double *pred_diversity,
                           double *label_diversity);

/**
 * Two-sided Wilcoxon signed-rank test on paired series `a` and `b` of
 * length `len`. Writes the W+ statistic, the p-value, the number of
 * informative (nonzero-difference) pairs, and whether the p-value came from
 * exact enumeration rather than the normal approximation; each out-pointer
 * may be null.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; each non-null out-pointer must be
 * valid for one write.
 */
enum PunetStatus punet_wilcoxon(const double *a,
                                const double *b,
                                size_t len,
                                double *statistic,
                                double *p_value,
                                size_t *n_used,
                                bool *exact);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUNET_H */
