#ifndef VLGP_MODEL_HPP
#define VLGP_MODEL_HPP

#include <cstdint>
#include <vector>

#include "vlgp/common.hpp"
#include "vlgp/gp_prior.hpp"

namespace vlgp {

/// Trial-structured spike counts. Each trial is T x N (rows are time bins);
/// trials share N but may differ in T.
struct SpikeData {
  std::vector<Matrix> trials;
  double bin_width = 0.001;  // seconds, metadata only
  Index history_order = 0;

  Index num_trials() const { return static_cast<Index>(trials.size()); }
  Index num_neurons() const { return trials.empty() ? 0 : trials.front().cols(); }
  std::vector<Index> lengths() const;
  Index total_bins() const;
  void validate() const;
};

/// Per-trial history design: one T x (1 + p) matrix per neuron with rows
/// [1, y_{t-p}, ..., y_{t-1}] (oldest lag first, zero before trial start).
struct HistoryDesign {
  Index order = 0;
  std::vector<Matrix> per_neuron;

  Index length() const { return per_neuron.empty() ? 0 : per_neuron.front().rows(); }
};

HistoryDesign build_history(const Matrix& trial, Index p);
std::vector<HistoryDesign> build_history(const SpikeData& data);

struct ModelParams {
  Matrix alpha;  // N x L latent loadings
  Matrix beta;   // N x (1 + p) bias and history weights

  Index num_neurons() const { return alpha.rows(); }
  Index num_latents() const { return alpha.cols(); }
  Index history_order() const { return beta.cols() - 1; }
};

/// Variational posterior of one trial: means, the diagonal W that determines
/// the covariance through Sigma = (K^-1 + W)^-1, and the marginal variances.
struct TrialPosterior {
  Matrix mu;  // T x L
  Matrix W;   // T x L, >= 0
  Matrix V;   // T x L, > 0
};

struct LatentPosterior {
  std::vector<TrialPosterior> trials;
};

inline constexpr double kDefaultExponentCap = 30.0;

/// Expected firing rate exp(beta.h + alpha.mu + 0.5 sum alpha^2 V) with the
/// exponent capped at `cap`. Sets *clamped when the cap was hit.
double expected_rate(const Vector& mu_t, const Vector& V_t, const Vector& alpha_n,
                     const Vector& beta_n, const Vector& h_tn,
                     double cap = kDefaultExponentCap, bool* clamped = nullptr);

/// T x N matrix of beta_n . h_{t,n}.
Matrix history_drive(const ModelParams& params, const HistoryDesign& history);

/// T x N expected rates for one trial. Adds the number of capped entries to
/// *clamp_count when given.
Matrix expected_rates(const Matrix& mu, const Matrix& V, const ModelParams& params,
                      const HistoryDesign& history, double cap = kDefaultExponentCap,
                      std::uint64_t* clamp_count = nullptr);

/// Point-process log-likelihood sum(y log lam - lam). Throws on lam <= 0.
double pp_loglik(const Matrix& y, const Matrix& lam);

/// diag(Sigma) for one latent, Sigma = G (I + G^T W G)^-1 G^T.
Vector posterior_variance(const PriorBasis& basis, const Vector& W);

/// KL(q || prior) of one latent on one trial in the low-rank representation:
/// 0.5 [mu^T K^-1 mu + tr(K^-1 Sigma) - logdet(K^-1 Sigma) - T].
double latent_kl(const PriorBasis& basis, const Vector& mu, const Vector& W);

struct ElboOptions {
  double exponent_cap = kDefaultExponentCap;
  /// exclude[n] drops neuron n from the likelihood (empty: keep all).
  std::vector<bool> exclude;
};

/// Expected log-likelihood sum_{t,n} [y (alpha.mu + beta.h) - lambda] of one trial.
double expected_loglik(const Matrix& y, const Matrix& mu, const Matrix& V,
                       const ModelParams& params, const HistoryDesign& history,
                       const ElboOptions& options = {});

/// Evidence lower bound summed over trials.
double elbo(const SpikeData& data, const std::vector<HistoryDesign>& history,
            const ModelParams& params, const LatentPosterior& posterior,
            const PriorFactors& factors, const ElboOptions& options = {});

void validate_shapes(const SpikeData& data, const ModelParams& params,
                     const LatentPosterior& posterior);

}  // namespace vlgp

#endif  // VLGP_MODEL_HPP
