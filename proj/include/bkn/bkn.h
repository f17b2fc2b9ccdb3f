/* C interface to the bkn normalization library and experiment driver.
 *
 * Every call returns a bkn_status. On failure the message is available from
 * bkn_last_error() on the same thread until the next failing call.
 * Strings handed out through char** must be released with bkn_string_free.
 */
#ifndef BKN_BKN_H
#define BKN_BKN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define BKN_API __declspec(dllexport)
#else
#define BKN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bkn_status {
  BKN_OK = 0,
  BKN_ERR_INTERNAL = 1,
  BKN_ERR_CONFIG = 2,
  BKN_ERR_NUMERIC = 3,
  BKN_ERR_IO = 4,
  BKN_ERR_DIMENSION = 5,
  BKN_ERR_INVALID_ARGUMENT = 6
} bkn_status;

typedef enum bkn_mode {
  BKN_MODE_TRAIN = 0,
  BKN_MODE_INFER = 1,
  BKN_MODE_EVAL_BATCHSTATS = 2
} bkn_mode;

typedef struct bkn_config_s* bkn_config;
typedef struct bkn_norm_layer_s* bkn_norm_layer;

BKN_API const char* bkn_version(void);
BKN_API const char* bkn_last_error(void);
BKN_API void bkn_string_free(char* s);

/* ---- experiment configuration ---- */

BKN_API bkn_status bkn_config_new(bkn_config* out);
BKN_API bkn_status bkn_config_from_preset(const char* name, bkn_config* out);
/* Applies a key=value (or flat JSON) file on top of the current settings. */
BKN_API bkn_status bkn_config_load(bkn_config cfg, const char* path);
BKN_API bkn_status bkn_config_set(bkn_config cfg, const char* key, const char* value);
BKN_API bkn_status bkn_config_get(bkn_config cfg, const char* key, char** value);
BKN_API bkn_status bkn_config_serialize(bkn_config cfg, char** text);
/* 16 hex digits identifying everything but the output directory. */
BKN_API bkn_status bkn_config_hash(bkn_config cfg, char** hash);
BKN_API bkn_status bkn_config_validate(bkn_config cfg);
BKN_API void bkn_config_free(bkn_config cfg);

/* ---- runs ---- */

typedef struct bkn_run_summary {
  uint64_t steps;
  uint64_t examples;
  uint64_t passes;
  double final_train_loss;
  double final_acc_moving;
  double final_acc_batch;
  double train_seconds;
  double examples_per_sec;
} bkn_run_summary;

BKN_API bkn_status bkn_run_experiment(bkn_config cfg, bkn_run_summary* summary);

/* Aligned text table in *text; the step-aligned series CSV is written to
 * csv_path when it is not NULL. thresholds may be NULL for the defaults. */
BKN_API bkn_status bkn_compare_runs(const char* const* run_dirs, size_t run_count,
                                    const double* thresholds, size_t threshold_count,
                                    const char* csv_path, char** text);

typedef struct bkn_gradcheck_summary {
  int passed;
  double max_rel;
  double tolerance;
  size_t parameters;
} bkn_gradcheck_summary;

/* Randomized single-layer gradient check. layer is "bn", "brn" or "bkn".
 * The per-parameter report goes to csv_path when it is not NULL. */
BKN_API bkn_status bkn_gradcheck(const char* layer, uint64_t seed, const char* csv_path,
                                 bkn_gradcheck_summary* summary, char** text);

typedef struct bkn_vargap_summary {
  double mean;
  double max;
  size_t layers;
  size_t batches;
} bkn_vargap_summary;

/* Variance gap of a finished run; also writes <run_dir>/vargap.csv. */
BKN_API bkn_status bkn_vargap(const char* run_dir, bkn_vargap_summary* summary);

/* ---- single normalization layers ----
 *
 * Inputs are row-major [batch, channels, height, width] doubles. A BKN layer
 * created with prev_channels > 0 is fed the estimate its predecessor emitted
 * on the predecessor's latest forward call.
 */

BKN_API bkn_status bkn_norm_layer_new(const char* kind, size_t channels, size_t prev_channels,
                                      int full_covariance, double alpha, double eps,
                                      bkn_norm_layer* out);
BKN_API void bkn_norm_layer_free(bkn_norm_layer layer);

BKN_API bkn_status bkn_norm_layer_forward(bkn_norm_layer layer, bkn_norm_layer prev,
                                          bkn_mode mode, const size_t shape[4],
                                          const double* x, double* y);
/* Needs a preceding BKN_MODE_TRAIN forward. grad_x has the input's size. */
BKN_API bkn_status bkn_norm_layer_backward(bkn_norm_layer layer, const double* grad_y,
                                           double* grad_x);

BKN_API bkn_status bkn_norm_layer_set_gain(bkn_norm_layer layer, double q);
BKN_API bkn_status bkn_norm_layer_gain(bkn_norm_layer layer, double* q);
/* Posterior mean and variance (diagonal) of the latest forward call. */
BKN_API bkn_status bkn_norm_layer_estimate(bkn_norm_layer layer, double* mean, double* var,
                                           size_t channels);
BKN_API bkn_status bkn_norm_layer_moving(bkn_norm_layer layer, double* mean, double* var,
                                         size_t channels);
/* Gradients of the latest backward call; q_raw is 0 without a predecessor. */
BKN_API bkn_status bkn_norm_layer_param_grads(bkn_norm_layer layer, double* grad_gamma,
                                              double* grad_beta, double* grad_q_raw,
                                              size_t channels);

#ifdef __cplusplus
}
#endif

#endif /* BKN_BKN_H */
