#ifndef VLGP_INIT_HPP
#define VLGP_INIT_HPP

#include <vector>

#include "vlgp/common.hpp"
#include "vlgp/model.hpp"

namespace vlgp {

struct FAResult {
  Matrix loading;                   // N x L
  std::vector<Matrix> latent_mean;  // per trial, T x L
  Vector noise_var;                 // N
  bool converged = false;
  Index iterations = 0;
  std::vector<double> loglik_trace;  // one entry per EM iteration
};

struct FAOptions {
  Index max_iter = 100;
  double tol = 1e-6;  // relative change of the log-likelihood
};

/// Factor analysis by EM on per-neuron centered counts, loadings started from
/// PCA of the sample covariance. `lengths` splits the posterior latent means
/// back into trials (rows of y are the concatenated time bins).
FAResult factor_analysis(const Matrix& y, Index L, const std::vector<Index>& lengths,
                         const FAOptions& options = {});
FAResult factor_analysis(const SpikeData& data, Index L, const FAOptions& options = {});

/// Rows of all trials stacked in trial order.
Matrix concatenate_trials(const std::vector<Matrix>& trials);

struct HistoryInit {
  Matrix beta;                  // N x (1 + p)
  std::vector<bool> ridge_used;  // neurons whose design was rank deficient
};

/// Per-neuron least squares of counts on the history design.
HistoryInit init_history_weights(const SpikeData& data,
                                 const std::vector<HistoryDesign>& history);

}  // namespace vlgp

#endif  // VLGP_INIT_HPP
