#include "vlgp/init.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <spdlog/spdlog.h>

namespace vlgp {

Matrix concatenate_trials(const std::vector<Matrix>& trials) {
  require(!trials.empty(), "concatenate_trials: no trials");
  Index rows = 0;
  for (const auto& y : trials) rows += y.rows();
  Matrix out(rows, trials.front().cols());
  Index offset = 0;
  for (const auto& y : trials) {
    require(y.cols() == out.cols(), "concatenate_trials: column mismatch");
    out.middleRows(offset, y.rows()) = y;
    offset += y.rows();
  }
  return out;
}

namespace {

double fa_loglik(const Matrix& loading, const Vector& psi, const Matrix& S,
                 double samples) {
  const Index N = S.rows();
  Matrix C = loading * loading.transpose();
  C.diagonal() += psi;
  Eigen::LLT<Matrix> llt(C);
  if (llt.info() != Eigen::Success)
    throw NumericalError("factor_analysis: model covariance is not positive definite");
  const Matrix& L = llt.matrixLLT();
  double logdet = 0;
  for (Index i = 0; i < N; ++i) logdet += 2.0 * std::log(L(i, i));
  const double trace = llt.solve(S).trace();
  return -0.5 * samples *
         (static_cast<double>(N) * std::log(2.0 * std::numbers::pi) + logdet + trace);
}

}  // namespace

FAResult factor_analysis(const Matrix& y, Index L, const std::vector<Index>& lengths,
                         const FAOptions& options) {
  const Index M = y.rows();
  const Index N = y.cols();
  require(L >= 1 && L < N, "factor_analysis: need 1 <= L < N");
  require(M >= 2, "factor_analysis: need at least two samples");
  Index total = 0;
  for (Index T : lengths) total += T;
  require(total == M, "factor_analysis: trial lengths do not sum to the row count");

  const Vector mean = y.colwise().mean();
  const Matrix yc = y.rowwise() - mean.transpose();
  const Matrix S = (yc.transpose() * yc) / static_cast<double>(M);
  const double floor = std::max(1e-6 * S.diagonal().mean(), 1e-12);

  // PCA start: top-L eigenpairs, residual variance spread as noise.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  const Vector evals = eig.eigenvalues();
  const Matrix evecs = eig.eigenvectors();
  const double resid =
      N > L ? std::max(evals.head(N - L).mean(), 0.0) : 0.0;
  Matrix loading(N, L);
  for (Index j = 0; j < L; ++j) {
    const Index idx = N - 1 - j;
    loading.col(j) = evecs.col(idx) * std::sqrt(std::max(evals(idx) - resid, 1e-12));
  }
  Vector psi = (S.diagonal() - loading.cwiseAbs2().rowwise().sum()).cwiseMax(floor);

  FAResult out;
  double prev = fa_loglik(loading, psi, S, static_cast<double>(M));
  out.loglik_trace.push_back(prev);
  Matrix proj;  // L x N, E[x|y] = proj * (y - mean)
  for (Index it = 0; it < options.max_iter; ++it) {
    Matrix C = loading * loading.transpose();
    C.diagonal() += psi;
    Eigen::LLT<Matrix> llt(C);
    if (llt.info() != Eigen::Success)
      throw NumericalError("factor_analysis: model covariance is not positive definite");
    proj = llt.solve(loading).transpose();
    Matrix exx = Matrix::Identity(L, L) - proj * loading;
    exx.noalias() += proj * S * proj.transpose();
    const Matrix SB = S * proj.transpose();  // N x L
    loading = exx.llt().solve(SB.transpose()).transpose();
    psi = (S.diagonal() - (loading.cwiseProduct(SB)).rowwise().sum()).cwiseMax(floor);

    const double ll = fa_loglik(loading, psi, S, static_cast<double>(M));
    out.loglik_trace.push_back(ll);
    out.iterations = it + 1;
    if (std::abs(ll - prev) <= options.tol * std::abs(prev)) {
      out.converged = true;
      break;
    }
    prev = ll;
  }
  if (!out.converged)
    spdlog::debug("factor_analysis: no convergence after {} iterations",
                  options.max_iter);

  Matrix C = loading * loading.transpose();
  C.diagonal() += psi;
  proj = C.llt().solve(loading).transpose();
  const Matrix latents = yc * proj.transpose();  // M x L

  out.loading = loading;
  out.noise_var = psi;
  Index offset = 0;
  for (Index T : lengths) {
    out.latent_mean.push_back(latents.middleRows(offset, T));
    offset += T;
  }
  return out;
}

FAResult factor_analysis(const SpikeData& data, Index L, const FAOptions& options) {
  return factor_analysis(concatenate_trials(data.trials), L, data.lengths(), options);
}

HistoryInit init_history_weights(const SpikeData& data,
                                 const std::vector<HistoryDesign>& history) {
  require(history.size() == data.trials.size(),
          "init_history_weights: history/trial count mismatch");
  const Index N = data.num_neurons();
  const Index P = 1 + data.history_order;
  HistoryInit out;
  out.beta.resize(N, P);
  out.ridge_used.assign(static_cast<size_t>(N), false);
  for (Index n = 0; n < N; ++n) {
    Matrix hth = Matrix::Zero(P, P);
    Vector hty = Vector::Zero(P);
    for (size_t k = 0; k < data.trials.size(); ++k) {
      const Matrix& h = history[k].per_neuron[static_cast<size_t>(n)];
      hth.noalias() += h.transpose() * h;
      hty.noalias() += h.transpose() * data.trials[k].col(n);
    }
    Eigen::LDLT<Matrix> ldlt(hth);
    if (!ldlt_usable(ldlt)) {
      hth.diagonal().array() += 1e-6;
      ldlt.compute(hth);
      out.ridge_used[static_cast<size_t>(n)] = true;
    }
    out.beta.row(n) = ldlt.solve(hty).transpose();
  }
  return out;
}

}  // namespace vlgp
