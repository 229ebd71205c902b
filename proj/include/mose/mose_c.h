/*
 * C interface to the MoSE laboratory. All functions return a status code;
 * on failure, mose_last_error() holds a thread-local description. Objects
 * are opaque handles owned by the library and released with the matching
 * _free function.
 */
#ifndef MOSE_C_H
#define MOSE_C_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mose_status {
  MOSE_OK = 0,
  MOSE_ERR_INVALID_ARG = 1,
  MOSE_ERR_IO = 2,
  MOSE_ERR_FORMAT = 3,
  MOSE_ERR_CONTRACT = 4,
  MOSE_ERR_SHAPE = 5,
  MOSE_ERR_INDEX = 6,
  MOSE_ERR_MISMATCH = 7,
  MOSE_ERR_CORPUS = 8,
  MOSE_ERR_NUMERIC = 9,
  MOSE_ERR_INTERNAL = 10
} mose_status;

typedef struct mose_run mose_run;       /* run configuration */
typedef struct mose_model mose_model;   /* model parameters plus their config */
typedef struct mose_corpus mose_corpus; /* byte corpus with train/held splits */

const char* mose_status_name(mose_status status);
const char* mose_last_error(void);

/* ---- configuration ---------------------------------------------------- */

mose_status mose_run_load(const char* json_path, mose_run** out);
mose_status mose_run_default(mose_run** out);
void mose_run_free(mose_run* run);

mose_status mose_run_set_seed(mose_run* run, uint64_t seed);
mose_status mose_run_set_corpus(mose_run* run, const char* path);
mose_status mose_run_set_out_dir(mose_run* run, const char* path);

int mose_run_n_layers(const mose_run* run);
int mose_run_top_k(const mose_run* run);
const char* mose_run_corpus_path(const mose_run* run);
const char* mose_run_out_dir(const mose_run* run);
const char* mose_run_checkpoint_path(const mose_run* run);

/* ---- model lifecycle --------------------------------------------------- */

mose_status mose_model_init(const mose_run* run, mose_model** out);
mose_status mose_model_load(const char* checkpoint_path, mose_model** out);
mose_status mose_model_save(const mose_model* model, const char* path);
/* MOSE_ERR_MISMATCH names the first differing architecture field. */
mose_status mose_model_check_config(const mose_model* model, const mose_run* run);
void mose_model_free(mose_model* model);

/* ---- corpus ------------------------------------------------------------ */

mose_status mose_corpus_open(const char* path, const mose_run* run, mose_corpus** out);
void mose_corpus_free(mose_corpus* corpus);
int64_t mose_corpus_train_sequences(const mose_corpus* corpus);
int64_t mose_corpus_held_sequences(const mose_corpus* corpus);

/* ---- width policy ------------------------------------------------------ */

enum { MOSE_POLICY_UNIFORM = 0, MOSE_POLICY_ROUTER_CONDITIONED = 1 };

typedef struct mose_policy {
  int mode;            /* MOSE_POLICY_* */
  double width;        /* uniform mode: global width in [w_min, 1] */
  double budget;       /* router-conditioned: per-token width budget */
  int discretize;      /* nonzero: snap widths to the trained grid */
  int layerwise;       /* nonzero: one gamma per transformer block */
  const double* gamma; /* NULL means gamma = 1; else layerwise ? n_layers : 1 values */
  int gamma_count;
  int k_override;      /* 0 keeps the trained top_k */
} mose_policy;

typedef struct mose_eval_result {
  double perplexity;
  double accuracy;
  double nll;
  double mflops_per_token;
  double moe_mflops;
  double attention_mflops;
  double other_mflops;
  double dropped_rate;
} mose_eval_result;

/* ---- operations --------------------------------------------------------- */

/* Runs the configured training schedule; writes train_log.csv and
 * checkpoint files under out_dir (out_dir NULL: the run's out_dir). */
mose_status mose_train(mose_model* model, const mose_corpus* corpus, const mose_run* run,
                       const char* out_dir);

/* Held-out-split evaluation under a width policy. */
mose_status mose_evaluate(const mose_model* model, const mose_corpus* corpus,
                          const mose_policy* policy, mose_eval_result* out);

/* Test-time training of the sharpness parameter at a fixed budget. Writes
 * up to gamma_capacity values and the calibration loss of the result. */
mose_status mose_calibrate_gamma(const mose_model* model, const mose_corpus* corpus,
                                 const mose_run* run, double budget, int layerwise,
                                 double* gamma_out, int gamma_capacity, int* gamma_count_out,
                                 double* calib_loss_out);

/* budget x {uniform, normprob, ttt-shared, ttt-layerwise} sweep, written as
 * CSV to csv_path. */
mose_status mose_sweep(const mose_model* model, const mose_corpus* corpus, const mose_run* run,
                       const double* budgets, int budget_count, const char* csv_path);

/* Analytic FLOPs report for the configured architecture under a policy,
 * serialized as JSON into json_out. No weights are loaded. */
mose_status mose_flops(const mose_run* run, const mose_policy* policy, char* json_out,
                       size_t json_capacity);

#ifdef __cplusplus
}
#endif

#endif /* MOSE_C_H */
