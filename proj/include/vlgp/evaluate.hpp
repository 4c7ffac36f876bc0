#ifndef VLGP_EVALUATE_HPP
#define VLGP_EVALUATE_HPP

#include <cstdint>
#include <vector>

#include "vlgp/common.hpp"
#include "vlgp/gp_prior.hpp"
#include "vlgp/inference.hpp"
#include "vlgp/model.hpp"

namespace vlgp {

/// Leave-one-neuron-out predictions. Column n of rate[k] is the prediction
/// for neuron n on trial k from the posterior inferred without neuron n.
struct PredictionSet {
  std::vector<Matrix> rate;    // per trial, T x N, > 0
  std::vector<Matrix> eta;     // matching linear predictor alpha.mu + beta.h
  std::vector<Matrix> counts;  // realized counts
  double ybar = 0;             // population mean count per bin

  void validate() const;
};

PredictionSet lono_predict(const SpikeData& test, const ModelParams& params,
                           const PriorFactors& factors, const InferConfig& config = {});

/// Population mean count per bin over all trials and neurons.
double population_mean_rate(const std::vector<Matrix>& counts);

/// Predictive log-likelihood in bits per spike against the constant rate ybar.
double pll(const PredictionSet& pred);
double pll(const std::vector<Matrix>& counts, const std::vector<Matrix>& rate, double ybar);

/// log(1 + exp(a eta)) / a.
double rectified_rate_from_gaussian(double eta, double a = 500.0);

/// 1 - SSE / SST with SST taken around the mean of all entries of y.
double predictive_r2(const std::vector<Matrix>& y, const std::vector<Matrix>& eta);
double predictive_r2(const Matrix& y, const Matrix& eta);

/// Spearman correlation with average ranks for ties. NaN when either input is
/// constant.
double spearman(const Vector& a, const Vector& b);

struct RankCorrelation {
  double mean_abs = 0;            // mean |rho| over usable dimensions
  std::vector<double> rho;        // per true dimension (NaN when excluded)
  std::vector<bool> excluded;     // constant true or aligned dimension
};

/// Least-squares alignment (with intercept) of the inferred latents onto the
/// true ones, then Spearman's rho per true dimension.
RankCorrelation rank_correlation(const Matrix& true_x, const Matrix& inferred_mu);
RankCorrelation rank_correlation(const std::vector<Matrix>& true_x,
                                 const std::vector<Matrix>& inferred_mu);

/// 1 - (ll_sat - ll_model) / (ll_sat - ll_null).
double pseudo_r2(double ll_model, double ll_null, double ll_saturated);

/// Poisson log-likelihood (without the log y! term) of a single population
/// rate, and of per-bin means across equally long repeat trials.
double loglik_null(const std::vector<Matrix>& counts);
double loglik_saturated(const std::vector<Matrix>& counts);

struct OrthogonalLatents {
  std::vector<Matrix> mu;  // rotated latents
  Matrix rotation;         // L x L orthogonal, mu_new = mu * rotation
  Vector singular_values;  // decreasing
  Matrix alpha;            // alpha * rotation (keeps alpha . mu unchanged)
};

/// SVD rotation of the stacked latents (or of their trial average when
/// `trial_average` and all trials share a length). Column signs are fixed
/// so that each rotation column's largest entry is positive.
OrthogonalLatents orthogonalize_latents(const std::vector<Matrix>& mu, const Matrix& alpha = {},
                                        bool trial_average = false);

/// 1 - ||C_model - C_true||_F / ||C_true||_F.
double noise_corr_power(const Matrix& C_model, const Matrix& C_true);

/// Pairwise Pearson correlation of rebinned counts after subtracting the
/// per-condition, per-bin mean across trials; zero diagonal. `conditions`
/// labels each trial (empty: one condition). Trials within a condition must
/// share a length.
Matrix noise_correlation(const std::vector<Matrix>& counts, Index bin_group,
                         const std::vector<int>& conditions = {});

/// Plug-in rates exp(alpha.mu + beta.h) with the realized history of data.
std::vector<Matrix> fitted_rates(const SpikeData& data, const ModelParams& params,
                                 const LatentPosterior& posterior,
                                 double cap = kDefaultExponentCap);

/// Poisson spike trains from the fitted rates, n_sims repeats of every trial,
/// then noise_correlation over all simulated trials.
Matrix noise_corr_from_rates(const std::vector<Matrix>& rates, Index n_sims, Index bin_group,
                             std::uint64_t seed, const std::vector<int>& conditions = {});
Matrix noise_corr_from_model(const ModelParams& params, const LatentPosterior& posterior,
                             const SpikeData& data, Index n_sims, Index bin_group,
                             std::uint64_t seed, const std::vector<int>& conditions = {});

/// Largest principal angle (radians) between the column spans.
double subspace_angle(const Matrix& A, const Matrix& B);

struct GlmOptions {
  Index max_iter = 100;
  double tol = 1e-8;
  Index step_halving_max = 10;
  double exponent_cap = kDefaultExponentCap;
};

/// Latent-free control: Newton fit of beta alone (alpha = 0, N x L).
ModelParams fit_glm(const SpikeData& data, Index L = 1, const GlmOptions& options = {});

/// Posterior with mu = 0, W = 0, V = 0 for every trial.
LatentPosterior zero_posterior(const SpikeData& data, Index L);

}  // namespace vlgp

#endif  // VLGP_EVALUATE_HPP
