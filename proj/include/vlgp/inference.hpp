#ifndef VLGP_INFERENCE_HPP
#define VLGP_INFERENCE_HPP

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "vlgp/common.hpp"
#include "vlgp/gp_prior.hpp"
#include "vlgp/model.hpp"

namespace vlgp {

struct FitConfig {
  Index L = 2;
  double tol = 1e-4;  // max-norm change of (mu, alpha, beta)
  Index max_iter = 50;
  Index step_halving_max = 10;
  double exponent_cap = kDefaultExponentCap;

  /// Starting kernels, one per latent (a single entry is broadcast).
  std::vector<KernelSpec> kernels{KernelSpec{}};
  FactorOptions factor;

  bool learn_hyper = true;
  Index hyper_every = 5;
  Index subsample_len = 100;
  Index n_subsamples = 20;
  Index hyper_steps = 10;  // gradient steps per hyperparameter update

  std::uint64_t seed = 0;
  int threads = 0;  // 0: leave the OpenMP default

  void validate() const;
  std::vector<KernelSpec> expanded_kernels() const;
};

struct FitReport {
  std::vector<double> elbo_trace;  // entry 0 is the initial state
  bool converged = false;
  Index iterations = 0;
  std::vector<std::vector<KernelSpec>> hyper_trace;  // kernels after each hyper step
  std::uint64_t clamp_count = 0;
  std::vector<double> wall_time;  // seconds per outer iteration
  std::vector<Index> rejected_steps;  // steps whose halving was exhausted
};

struct StepStats {
  Index accepted = 0;
  Index rejected = 0;
  Index halvings = 0;
};

/// Working set of the coordinate ascent: data, parameters, posterior, prior
/// bases and the cached expected rates. Not thread-safe; one per session.
class VariationalState {
public:
  VariationalState(const SpikeData& data, ModelParams params, LatentPosterior posterior,
                   PriorFactors factors, double exponent_cap = kDefaultExponentCap,
                   Index step_halving_max = 10, std::vector<bool> exclude = {});

  const SpikeData& data() const { return *data_; }
  const std::vector<HistoryDesign>& history() const { return history_; }
  const ModelParams& params() const { return params_; }
  const LatentPosterior& posterior() const { return posterior_; }
  const PriorFactors& factors() const { return factors_; }
  const Matrix& rates(Index trial) const { return rates_.at(static_cast<size_t>(trial)); }
  std::uint64_t clamp_count() const { return clamp_count_; }
  const std::vector<bool>& exclude() const { return exclude_; }

  double elbo() const;

  /// Newton step for latent l on every trial, with step halving on the trial
  /// ELBO. With `center` the step keeps each trial's mean at zero.
  StepStats newton_mu(Index l, bool center = true);
  StepStats newton_alpha(Index n);
  StepStats newton_beta(Index n);

  /// Analytic ELBO gradients: in mu_l of trial k (within span(G)), and in the
  /// loadings and history weights of neuron n.
  Vector gradient_mu(Index l, Index k) const;
  Vector gradient_alpha(Index n) const;
  Vector gradient_beta(Index n) const;

  /// W = sum_n lambda alpha^2 and V from W. Plain fixed-point update.
  void update_W_and_V();
  /// Same, but damped towards the fixed point until the ELBO does not drop.
  StepStats update_W_and_V_guarded();

  /// Center mu and max-norm alpha; the compensating scale is also applied to
  /// the prior so lambda and the ELBO are unchanged. Returns the scales.
  std::vector<double> constrain();

  /// One hyperparameter update of latent l from random windows, accepted only
  /// if the full ELBO does not decrease.
  bool update_hyper(Index l, std::mt19937_64& rng, Index window_len, Index n_windows,
                    Index steps);

  void refresh_rates();

  void set_params(ModelParams params);
  void set_posterior(LatentPosterior posterior);

private:
  struct TrialEval {
    double loglik = 0;
    Matrix rates;
    std::uint64_t clamped = 0;
  };
  TrialEval evaluate_trial(Index k, const Matrix& mu, const Matrix& V) const;
  double neuron_loglik(Index n, const Vector& alpha_n, const Vector& beta_n,
                       std::vector<Vector>* rates_out) const;
  void recompute_variance(Index l);

  const SpikeData* data_;
  std::vector<HistoryDesign> history_;
  ModelParams params_;
  LatentPosterior posterior_;
  PriorFactors factors_;
  std::vector<Matrix> rates_;
  double cap_;
  Index halving_max_;
  std::vector<bool> exclude_;
  std::uint64_t clamp_count_ = 0;
};

/// Newton update of one latent on one trial in span(G):
/// mu + G (I+B)^-1 (G^T g - a), B = G^T diag(w) G, g = sum_n (y - lambda) alpha_l,
/// w = sum_n lambda alpha_l^2 and G a = mu. With `center` the step is the
/// equality-constrained Newton step that keeps mean(mu) fixed.
Vector newton_mu_step(const PriorBasis& basis, const Vector& mu, const Vector& g,
                      const Vector& w, bool center = false);

struct ConstrainResult {
  std::vector<double> scales;      // max-norm of each loading column
  std::vector<bool> zero_column;   // columns left unchanged
};

/// Zero-centers each mu_l per trial (along the projected constant of the
/// matching basis when factors are given) and divides each loading column by
/// its max-norm, scaling mu by s, V by s^2 and W by 1/s^2.
ConstrainResult constrain(ModelParams& params, LatentPosterior& posterior,
                          const PriorFactors* factors = nullptr);

/// Dense window of one latent's posterior used by the hyperparameter step.
struct HyperWindow {
  Vector mu;
  Matrix sigma;
  double logdet_sigma = 0;
};

/// Draws windows uniformly (trial, then start) and rebuilds the dense
/// Sigma_w = (K_w^-1 + W_w)^-1 from the stored W. Windows whose jittered
/// kernel is not positive definite are skipped.
std::vector<HyperWindow> draw_hyper_windows(const LatentPosterior& posterior, Index l,
                                            const KernelSpec& spec, double jitter,
                                            Index window_len, Index n_windows,
                                            std::mt19937_64& rng);

/// -0.5 sum_w [mu^T K^-1 mu + tr(K^-1 Sigma) - logdet(K^-1 Sigma) - T_w].
double hyper_objective(const std::vector<HyperWindow>& windows, const KernelSpec& spec,
                       double jitter);

/// Gradient of hyper_objective in (log sigma2, log omega).
Eigen::Vector2d hyper_gradient(const std::vector<HyperWindow>& windows,
                               const KernelSpec& spec, double jitter);

/// Backtracking gradient ascent on hyper_objective in log space.
KernelSpec optimize_hyper(const std::vector<HyperWindow>& windows, KernelSpec spec,
                          double jitter, Index steps);

struct FitResult {
  ModelParams params;
  LatentPosterior posterior;
  PriorFactors factors;
  FitReport report;
};

/// Called after every outer iteration with the iteration number and the
/// current state.
using IterationCallback = std::function<void(Index, const VariationalState&)>;

FitResult fit(const SpikeData& data, const FitConfig& config,
              const IterationCallback& callback = {});

struct InferConfig {
  double tol = 1e-4;
  Index max_iter = 100;
  Index step_halving_max = 10;
  double exponent_cap = kDefaultExponentCap;
  bool center = true;  // keep each mu_l zero-mean per trial as fit does
};

/// Posterior of new trials with parameters and kernels frozen. exclude[n]
/// hides neuron n from the inference.
LatentPosterior infer_posterior(const SpikeData& data, const ModelParams& params,
                                const PriorFactors& factors, const InferConfig& config,
                                const std::vector<bool>& exclude = {});
LatentPosterior infer_posterior(const SpikeData& data, const ModelParams& params,
                                const std::vector<KernelSpec>& kernels,
                                const FactorOptions& factor, const InferConfig& config,
                                const std::vector<bool>& exclude = {});

/// Prior-only posterior: mu = 0, W = 0, V = diag(G G^T).
LatentPosterior prior_posterior(const SpikeData& data, const PriorFactors& factors);

}  // namespace vlgp

#endif  // VLGP_INFERENCE_HPP
