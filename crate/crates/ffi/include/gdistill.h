#ifndef GDISTILL_H
#define GDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GdStatus {
  GD_STATUS_OK = 0,
  GD_STATUS_NULL_POINTER = 1,
  GD_STATUS_INVALID_INPUT = 2,
  GD_STATUS_INVALID_CONFIG = 3,
  GD_STATUS_NUMERIC = 4,
  GD_STATUS_IO = 5,
  GD_STATUS_CONTRACT = 6,
  GD_STATUS_PANIC = 7,
} GdStatus;

typedef struct GdConfig GdConfig;

typedef struct GdModel GdModel;

typedef struct GdResults GdResults;

/**
 * Aggregate metrics of one variant.
 */
typedef struct GdAggregate {
  size_t seeds;
  size_t failed;
  double acc_mean;
  double acc_std;
  double fgt_mean;
  double fgt_std;
} GdAggregate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length, or 0 when the
 * last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gd_last_error(char *buf, size_t len);

/**
 * Parses a TOML config. A null `text` yields the defaults.
 *
 * # Safety
 * `text` must be null or a NUL-terminated string; `out` must be writable.
 */
enum GdStatus gd_config_parse(const char *text, struct GdConfig **out);

/**
 * Serializes a config as TOML; free the string with [`gd_string_free`].
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum GdStatus gd_config_to_toml(const struct GdConfig *config, char **out);

/**
 * Number of seeds and variants in a config.
 *
 * # Safety
 * `config` must be a live handle; the outputs must be writable or null.
 */
enum GdStatus gd_config_grid(const struct GdConfig *config, size_t *seeds, size_t *variants);

/**
 * # Safety
 * `config` must be null or a handle from [`gd_config_parse`], freed once.
 */
void gd_config_free(struct GdConfig *config);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void gd_string_free(char *s);

/**
 * Runs the whole grid and writes results under `out_dir` (the config's
 * `output_dir` when null).
 *
 * # Safety
 * `config` must be a live handle, `out_dir` null or NUL-terminated, `out` writable.
 */
enum GdStatus gd_run_experiment(const struct GdConfig *config,
                                const char *out_dir,
                                struct GdResults **out);

/**
 * # Safety
 * `results` must be a live handle; `count` writable.
 */
enum GdStatus gd_results_variant_count(const struct GdResults *results, size_t *count);

/**
 * Aggregate row `index` and its variant name (free with [`gd_string_free`];
 * pass null to skip).
 *
 * # Safety
 * `results` must be a live handle; `row` writable; `name` null or writable.
 */
enum GdStatus gd_results_aggregate(const struct GdResults *results,
                                   size_t index,
                                   struct GdAggregate *row,
                                   char **name);

/**
 * # Safety
 * `results` must be null or a handle from [`gd_run_experiment`], freed once.
 */
void gd_results_free(struct GdResults *results);

/**
 * Loads a model checkpoint written by the runner.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum GdStatus gd_model_load(const char *path, struct GdModel **out);

/**
 * Input width and number of classes over all heads.
 *
 * # Safety
 * `model` must be a live handle; the outputs writable or null.
 */
enum GdStatus gd_model_shape(const struct GdModel *model, size_t *input_dim, size_t *num_classes);

/**
 * Class probabilities over all heads for `rows` row-major inputs.
 * `out` holds `rows * num_classes` values.
 *
 * # Safety
 * `inputs` must hold `rows * input_dim` values and `out` `out_len` writable values.
 */
enum GdStatus gd_model_predict_proba(const struct GdModel *model,
                                     const double *inputs,
                                     size_t rows,
                                     double *out,
                                     size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle from [`gd_model_load`], freed once.
 */
void gd_model_free(struct GdModel *model);

/**
 * Softmax of `n` logits at temperature `gamma`.
 *
 * # Safety
 * `logits` and `out` must each hold `n` values.
 */
enum GdStatus gd_softmax(const double *logits, size_t n, double gamma, double *out);

/**
 * Ensemble target from the previous model's distribution over `n_prev`
 * classes and the current teacher's over `n_cur`; `out` holds
 * `n_prev + n_cur` values. `epsilon` may be null.
 *
 * # Safety
 * Buffers must hold the stated number of values.
 */
enum GdStatus gd_q_predict(const double *p_prev,
                           size_t n_prev,
                           const double *p_cur,
                           size_t n_cur,
                           double *out,
                           double *epsilon);

/**
 * ACC and FGT of a lower-triangular accuracy matrix packed by stage:
 * `A[0][0], A[0][1], A[1][1], A[0][2], ...` (task index first, stage second).
 *
 * # Safety
 * `accuracies` must hold `stages * (stages + 1) / 2` values, `task_sizes`
 * `stages` values; outputs writable or null.
 */
enum GdStatus gd_metrics(const double *accuracies,
                         const size_t *task_sizes,
                         size_t stages,
                         double *acc_out,
                         double *fgt_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDISTILL_H */
