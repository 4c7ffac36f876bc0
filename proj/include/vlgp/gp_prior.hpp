#ifndef VLGP_GP_PRIOR_HPP
#define VLGP_GP_PRIOR_HPP

#include <map>
#include <vector>

#include <Eigen/QR>

#include "vlgp/common.hpp"

namespace vlgp {

/// Squared-exponential kernel sigma2 * exp(-omega * (t - s)^2) on integer
/// time bins. `jitter` is added to the diagonal.
struct KernelSpec {
  double sigma2 = 1.0;
  double omega = 0.01;
  double jitter = 0.0;

  void validate() const;
};

/// Jitter used whenever a dense kernel has to be factored or inverted.
inline double default_dense_jitter(const KernelSpec& spec) {
  return 1e-7 * spec.sigma2;
}

double sq_exp_cov(Index t, Index s, const KernelSpec& spec);

/// Dense T x T kernel matrix, jitter included.
Matrix dense_kernel(Index T, const KernelSpec& spec);

/// Squared time-distance matrix D(t, s) = (t - s)^2.
Matrix squared_distance(Index T);

/// Truncated pivoted Cholesky factor, K ~= G G^T.
struct CholFactor {
  Matrix G;                   // T x r
  Index rank = 0;
  double residual_trace = 0;  // trace(K - G G^T) at truncation
  std::vector<Index> pivots;  // pivot order, length r
};

/// Greedy diagonal-pivoted incomplete Cholesky. Kernel columns are evaluated
/// one at a time; the dense matrix is never formed. Stops at the smallest rank
/// whose residual trace is <= tol, or at max_rank.
CholFactor incomplete_cholesky(Index T, const KernelSpec& spec, double tol,
                               Index max_rank);

struct KernelLogGrads {
  Matrix d_log_sigma2;  // dK / d log sigma2
  Matrix d_log_omega;   // dK / d log omega
};

/// Derivatives of the jitter-free dense kernel in log-hyperparameter space.
KernelLogGrads kernel_log_grads(Index T, const KernelSpec& spec);

/// Truncation settings. The residual-trace tolerance is rel_tol * T * sigma2.
struct FactorOptions {
  double rel_tol = 1e-8;
  Index max_rank = 100;
};

/// One low-rank prior basis for a given trial length: the factor plus the
/// least-squares machinery for mapping latent means onto span(G).
class PriorBasis {
public:
  PriorBasis() = default;
  explicit PriorBasis(CholFactor factor);

  const Matrix& G() const { return factor_.G; }
  const CholFactor& factor() const { return factor_; }
  Index length() const { return factor_.G.rows(); }
  Index rank() const { return factor_.rank; }

  /// Least-squares coefficients a with G a ~= mu.
  Vector coefficients(const Vector& mu) const;
  /// Orthogonal projection of mu onto span(G).
  Vector project(const Vector& mu) const;
  /// Pseudo-inverse prior precision applied to mu: (G^+)^T G^+ mu. Equals
  /// K^-1 mu when G is square.
  Vector precision_times(const Vector& mu) const;
  /// G^T 1; the zero-mean constraint reads ones_coef()^T a = 0.
  const Vector& ones_coef() const { return ones_coef_; }
  /// Subtracts the multiple of the projected constant that zeroes the mean,
  /// so the result stays in span(G).
  Vector center(const Vector& mu) const;

private:
  CholFactor factor_;
  Eigen::HouseholderQR<Matrix> qr_;
  Vector ones_coef_;
  Vector center_direction_;
};

/// Per-latent kernels and their low-rank bases, one basis per distinct trial
/// length. Trials have independent priors; latents are independent.
class PriorFactors {
public:
  PriorFactors() = default;
  PriorFactors(std::vector<KernelSpec> kernels, FactorOptions options,
               const std::vector<Index>& lengths);

  Index num_latents() const { return static_cast<Index>(kernels_.size()); }
  const KernelSpec& kernel(Index l) const { return kernels_.at(l); }
  const std::vector<KernelSpec>& kernels() const { return kernels_; }
  const FactorOptions& options() const { return options_; }
  const PriorBasis& basis(Index l, Index T) const;

  /// Replaces the kernel of latent l and rebuilds its bases.
  void set_kernel(Index l, const KernelSpec& spec);
  /// Scales latent l's prior by s^2 (sigma2, jitter and G by s).
  void rescale(Index l, double s);
  /// Makes sure bases exist for the given lengths.
  void ensure_lengths(const std::vector<Index>& lengths);

private:
  PriorBasis build(const KernelSpec& spec, Index T) const;

  std::vector<KernelSpec> kernels_;
  FactorOptions options_;
  std::vector<std::map<Index, PriorBasis>> bases_;
};

}  // namespace vlgp

#endif  // VLGP_GP_PRIOR_HPP
