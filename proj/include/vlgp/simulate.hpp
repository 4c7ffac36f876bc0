#ifndef VLGP_SIMULATE_HPP
#define VLGP_SIMULATE_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vlgp/common.hpp"
#include "vlgp/gp_prior.hpp"
#include "vlgp/model.hpp"

namespace vlgp {

enum class LatentKind { gp, lorenz, lds };

LatentKind parse_latent_kind(const std::string& name);
std::string to_string(LatentKind kind);

/// Spike-suppressing filter used for the Lorenz data, most recent lag first.
std::vector<double> default_history_filter();

/// x_{t+1} ~ N(A x_t + b, Q), x_0 ~ N(mu0, Q0).
struct LdsSpec {
  Matrix A;
  Vector b;
  Matrix Q;
  Vector mu0;
  Matrix Q0;

  /// Slowly rotating, lightly damped 3-d system with unit stationary variance.
  static LdsSpec rotating(Index L = 3, double period = 200.0, double decay = 0.995);
  void validate() const;
};

struct SimSpec {
  LatentKind latent_kind = LatentKind::gp;
  Index N = 50;
  Index L = 2;  // forced to 3 for lorenz
  Index T = 1000;
  Index trials = 10;
  std::uint64_t seed = 0;
  double bin_width = 0.001;

  KernelSpec kernel;          // gp latents
  double lorenz_dt = 0.0015;  // lorenz latents
  LdsSpec lds;                // lds latents

  /// Most recent lag first; empty means p = 0. Not used for lds data.
  std::vector<double> history_filter;

  /// Loadings: i.i.d. standard normal, columns max-norm normalized, then
  /// multiplied by loading_scale. Biases: bias_mean + bias_sd * N(0, 1).
  double loading_scale = 1.0;
  double bias_mean = 0.0;
  double bias_sd = 0.0;

  /// Explicit parameters override the generated ones when non-empty.
  Matrix alpha;
  Vector bias;

  double exponent_cap = kDefaultExponentCap;

  /// Defaults for each latent kind (filter, rates, loading scale).
  static SimSpec defaults(LatentKind kind);
  Index latent_dim() const;
  void validate() const;
};

struct SimDataset {
  SimSpec spec;
  SpikeData data;
  std::vector<Matrix> latents;  // per trial, T x L
  /// Generating parameters. For lds data alpha holds C and beta's bias column d.
  ModelParams truth;
  std::uint64_t multi_spike_bins = 0;
  std::uint64_t clamp_count = 0;
};

/// Generator for (seed, trial, stream); streams separate parameters, latents
/// and spikes so each can be reproduced alone.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t trial, std::uint64_t stream);

/// Columns drawn from N(0, K) by a dense Cholesky, jitter escalated on
/// failure. Lengths above kDenseSampleLimit use a tight incomplete Cholesky.
inline constexpr Index kDenseSampleLimit = 4000;
Matrix sample_gp_latent(Index T, Index L, const KernelSpec& spec, std::uint64_t seed);
Matrix sample_gp_latent(Index T, Index L, const KernelSpec& spec, std::mt19937_64& rng);

Eigen::Vector3d lorenz_derivative(const Eigen::Vector3d& s);

/// RK4 integration after `burn_in` discarded steps, unstandardized, T x 3.
Matrix lorenz_raw(Index T, double dt, const Eigen::Vector3d& x0, Index burn_in = 500);

/// x0 ~ N((1, 1, 28), I), then lorenz_raw standardized per column.
Matrix lorenz_trajectory(Index T, double dt, std::uint64_t seed);
Matrix lorenz_trajectory(Index T, double dt, std::mt19937_64& rng);

Matrix lds_trajectory(const LdsSpec& spec, Index T, std::uint64_t seed);
Matrix lds_trajectory(const LdsSpec& spec, Index T, std::mt19937_64& rng);

/// beta rows [bias, filter[p-1], ..., filter[0]] matching the oldest-first
/// history layout.
Matrix history_weights_from_filter(const Vector& bias, const std::vector<double>& filter);

struct SpikeStats {
  std::uint64_t multi_spike_bins = 0;
  std::uint64_t clamped = 0;
};

/// Sequential Poisson draws y_t ~ Poisson(exp(alpha x_t + beta h_t)) where h_t
/// is built from the spikes already drawn.
Matrix generate_spikes_pp(const Matrix& x, const ModelParams& params, std::mt19937_64& rng,
                          double cap = kDefaultExponentCap, SpikeStats* stats = nullptr);
Matrix generate_spikes_pp(const Matrix& x, const ModelParams& params, std::uint64_t seed,
                          double cap = kDefaultExponentCap, SpikeStats* stats = nullptr);

/// y ~ Poisson(log(1 + exp(C x_t + d))).
Matrix generate_spikes_lds_poisson(const Matrix& x, const Matrix& C, const Vector& d,
                                   std::mt19937_64& rng, SpikeStats* stats = nullptr);
Matrix generate_spikes_lds_poisson(const Matrix& x, const Matrix& C, const Vector& d,
                                   std::uint64_t seed, SpikeStats* stats = nullptr);

/// log(1 + exp(x)) without overflow.
double softplus(double x);

/// Full dataset for a spec: parameters, latents and spikes for every trial.
SimDataset simulate(const SimSpec& spec);

}  // namespace vlgp

#endif  // VLGP_SIMULATE_HPP
