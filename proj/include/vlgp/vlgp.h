/*
 * C interface of libvlgp. All functions return one of the vlgp_status codes;
 * on failure vlgp_last_error() describes the problem (per thread). Matrices
 * cross the boundary as row-major double arrays. Handles are opaque and must
 * be released with the matching *_free function.
 */
#ifndef VLGP_H
#define VLGP_H

#include <stdint.h>

#if defined(_WIN32)
#define VLGP_API __declspec(dllexport)
#elif defined(VLGP_BUILDING_SHARED)
#define VLGP_API __attribute__((visibility("default")))
#else
#define VLGP_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vlgp_status {
  VLGP_OK = 0,
  VLGP_ERR_INTERNAL = 1,
  VLGP_ERR_VALIDATION = 2,
  VLGP_ERR_NUMERICAL = 3
} vlgp_status;

typedef struct vlgp_dataset vlgp_dataset;
typedef struct vlgp_model vlgp_model;

VLGP_API const char* vlgp_version(void);
VLGP_API const char* vlgp_last_error(void);

/* Runs one batch command: "simulate", "fit", "infer", "lono" or "evaluate".
 * has_seed != 0 overrides the config's seed; threads <= 0 keeps the default. */
VLGP_API int vlgp_run_command(const char* command, const char* config_path,
                              const char* out_dir, int has_seed, uint64_t seed,
                              int threads);

/* ---- datasets ---- */

/* spec_json: the object accepted under "simulate" in a simulate config. */
VLGP_API int vlgp_simulate(const char* spec_json, vlgp_dataset** out);
/* counts holds the trials back to back, each lengths[k] x num_neurons. */
VLGP_API int vlgp_dataset_from_counts(int64_t num_trials, const int64_t* lengths,
                                      int64_t num_neurons, const double* counts,
                                      int64_t history_order, double bin_width,
                                      vlgp_dataset** out);
VLGP_API int vlgp_dataset_load(const char* dir, vlgp_dataset** out);
VLGP_API int vlgp_dataset_save(const vlgp_dataset* ds, const char* dir);
VLGP_API void vlgp_dataset_free(vlgp_dataset* ds);
VLGP_API int vlgp_dataset_info(const vlgp_dataset* ds, int64_t* num_trials,
                               int64_t* num_neurons, int64_t* history_order,
                               int64_t* latent_dim);
VLGP_API int vlgp_dataset_trial_length(const vlgp_dataset* ds, int64_t trial, int64_t* T);
/* out: T x N */
VLGP_API int vlgp_dataset_counts(const vlgp_dataset* ds, int64_t trial, double* out);
/* out: T x L_true; VLGP_ERR_VALIDATION when the dataset has no latents. */
VLGP_API int vlgp_dataset_latent(const vlgp_dataset* ds, int64_t trial, double* out);

/* ---- models ---- */

/* config_json: the object accepted under "fit" (may be NULL for defaults). */
VLGP_API int vlgp_fit(const vlgp_dataset* ds, const char* config_json, vlgp_model** out);
VLGP_API int vlgp_model_load(const char* dir, vlgp_model** out);
VLGP_API int vlgp_model_save(const vlgp_model* m, const char* dir);
VLGP_API void vlgp_model_free(vlgp_model* m);
VLGP_API int vlgp_model_info(const vlgp_model* m, int64_t* num_neurons, int64_t* latent_dim,
                             int64_t* history_order, int64_t* iterations, double* final_elbo);
/* out: N x L */
VLGP_API int vlgp_model_alpha(const vlgp_model* m, double* out);
/* out: N x (1 + p) */
VLGP_API int vlgp_model_beta(const vlgp_model* m, double* out);
/* Posterior mean of the k-th training trial, T x L. */
VLGP_API int vlgp_model_posterior_mean(const vlgp_model* m, int64_t trial, double* out);

/* Posterior means of every trial of ds, stacked (total bins x L). mask holds
 * mask_len neuron indices hidden from the inference (may be NULL). */
VLGP_API int vlgp_infer(const vlgp_model* m, const vlgp_dataset* ds, const int64_t* mask,
                        int64_t mask_len, double* mu_out);
/* Leave-one-neuron-out PLL (bits per spike) on every trial of ds. */
VLGP_API int vlgp_lono_pll(const vlgp_model* m, const vlgp_dataset* ds, double* pll_out);
/* Mean |Spearman rho| after least-squares alignment. true_x: T x Lt, mu: T x L. */
VLGP_API int vlgp_rank_correlation(const double* true_x, const double* mu, int64_t T,
                                   int64_t true_dim, int64_t latent_dim, double* out);

#ifdef __cplusplus
}
#endif

#endif /* VLGP_H */
