#include "vlgp/model.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>

namespace vlgp {

std::vector<Index> SpikeData::lengths() const {
  std::vector<Index> out;
  out.reserve(trials.size());
  for (const auto& y : trials) out.push_back(y.rows());
  return out;
}

Index SpikeData::total_bins() const {
  Index total = 0;
  for (const auto& y : trials) total += y.rows();
  return total;
}

void SpikeData::validate() const {
  require(!trials.empty(), "SpikeData: no trials");
  require(history_order >= 0, "SpikeData: history order must be >= 0");
  require(std::isfinite(bin_width) && bin_width > 0,
          "SpikeData: bin_width must be > 0");
  const Index N = num_neurons();
  require(N >= 1, "SpikeData: no neurons");
  for (size_t k = 0; k < trials.size(); ++k) {
    const Matrix& y = trials[k];
    require(y.cols() == N, "SpikeData: trial " + std::to_string(k) +
                               " has a different neuron count");
    require(y.rows() >= 1, "SpikeData: trial " + std::to_string(k) + " is empty");
    for (Index j = 0; j < y.size(); ++j) {
      const double v = y.data()[j];
      require(std::isfinite(v) && v >= 0 && v == std::floor(v),
              "SpikeData: trial " + std::to_string(k) +
                  " has a count that is not a non-negative integer");
    }
  }
}

HistoryDesign build_history(const Matrix& trial, Index p) {
  require(p >= 0, "build_history: p must be >= 0");
  const Index T = trial.rows();
  const Index N = trial.cols();
  HistoryDesign h;
  h.order = p;
  h.per_neuron.assign(static_cast<size_t>(N), Matrix::Zero(T, 1 + p));
  for (Index n = 0; n < N; ++n) {
    Matrix& hn = h.per_neuron[static_cast<size_t>(n)];
    hn.col(0).setOnes();
    // Column j (1..p) holds lag p - j + 1, so column p is lag 1.
    for (Index j = 1; j <= p; ++j) {
      const Index lag = p - j + 1;
      for (Index t = lag; t < T; ++t) hn(t, j) = trial(t - lag, n);
    }
  }
  return h;
}

std::vector<HistoryDesign> build_history(const SpikeData& data) {
  std::vector<HistoryDesign> out;
  out.reserve(data.trials.size());
  for (const auto& y : data.trials) out.push_back(build_history(y, data.history_order));
  return out;
}

double expected_rate(const Vector& mu_t, const Vector& V_t, const Vector& alpha_n,
                     const Vector& beta_n, const Vector& h_tn, double cap,
                     bool* clamped) {
  double eta = beta_n.dot(h_tn) + alpha_n.dot(mu_t) +
               0.5 * alpha_n.cwiseAbs2().dot(V_t);
  const bool hit = eta > cap;
  if (hit) eta = cap;
  if (clamped) *clamped = hit;
  return std::exp(eta);
}

Matrix history_drive(const ModelParams& params, const HistoryDesign& history) {
  const Index N = params.num_neurons();
  require(static_cast<Index>(history.per_neuron.size()) == N,
          "history_drive: neuron count mismatch");
  require(history.order == params.history_order(),
          "history_drive: history order mismatch");
  Matrix out(history.length(), N);
  for (Index n = 0; n < N; ++n)
    out.col(n).noalias() =
        history.per_neuron[static_cast<size_t>(n)] * params.beta.row(n).transpose();
  return out;
}

Matrix expected_rates(const Matrix& mu, const Matrix& V, const ModelParams& params,
                      const HistoryDesign& history, double cap,
                      std::uint64_t* clamp_count) {
  Matrix eta = history_drive(params, history);
  eta.noalias() += mu * params.alpha.transpose();
  eta.noalias() += 0.5 * V * params.alpha.cwiseAbs2().transpose();
  std::uint64_t hits = 0;
  for (Index j = 0; j < eta.size(); ++j) {
    double& e = eta.data()[j];
    if (e > cap) {
      e = cap;
      ++hits;
    }
    e = std::exp(e);
  }
  if (clamp_count) *clamp_count += hits;
  return eta;
}

double pp_loglik(const Matrix& y, const Matrix& lam) {
  require(y.rows() == lam.rows() && y.cols() == lam.cols(),
          "pp_loglik: shape mismatch");
  double total = 0;
  for (Index j = 0; j < y.size(); ++j) {
    const double l = lam.data()[j];
    if (!(l > 0)) throw NumericalError("pp_loglik: non-positive rate");
    total += y.data()[j] * std::log(l) - l;
  }
  return total;
}

namespace {

Matrix identity_plus_weighted_gram(const Matrix& G, const Vector& W) {
  const Index r = G.cols();
  Matrix M = Matrix::Identity(r, r);
  M.noalias() += G.transpose() * W.asDiagonal() * G;
  return M;
}

}  // namespace

Vector posterior_variance(const PriorBasis& basis, const Vector& W) {
  const Matrix& G = basis.G();
  require(W.size() == G.rows(), "posterior_variance: length mismatch");
  Eigen::LLT<Matrix> llt(identity_plus_weighted_gram(G, W));
  if (llt.info() != Eigen::Success)
    throw NumericalError("posterior_variance: I + B is not positive definite");
  // diag(G (I+B)^-1 G^T) = column norms of L^-1 G^T
  Matrix X = G.transpose();
  llt.matrixL().solveInPlace(X);
  return X.colwise().squaredNorm().transpose();
}

double latent_kl(const PriorBasis& basis, const Vector& mu, const Vector& W) {
  const Matrix& G = basis.G();
  require(W.size() == G.rows() && mu.size() == G.rows(),
          "latent_kl: length mismatch");
  const Index r = G.cols();
  Eigen::LLT<Matrix> llt(identity_plus_weighted_gram(G, W));
  if (llt.info() != Eigen::Success)
    throw NumericalError("latent_kl: I + B is not positive definite");
  // With Sigma = G (I+B)^-1 G^T:
  //   tr(K^-1 Sigma) = T - r + tr((I+B)^-1),  logdet(K^-1 Sigma) = -logdet(I+B).
  const Matrix inv = llt.solve(Matrix::Identity(r, r));
  const Matrix& L = llt.matrixLLT();
  double logdet = 0;
  for (Index i = 0; i < r; ++i) logdet += 2.0 * std::log(L(i, i));
  const Vector a = basis.coefficients(mu);
  return 0.5 * (a.squaredNorm() + inv.trace() - static_cast<double>(r) + logdet);
}

double expected_loglik(const Matrix& y, const Matrix& mu, const Matrix& V,
                       const ModelParams& params, const HistoryDesign& history,
                       const ElboOptions& options) {
  const Index N = params.num_neurons();
  require(y.cols() == N && y.rows() == mu.rows(), "expected_loglik: shape mismatch");
  Matrix lin = history_drive(params, history);
  lin.noalias() += mu * params.alpha.transpose();
  Matrix var = 0.5 * V * params.alpha.cwiseAbs2().transpose();
  double total = 0;
  for (Index n = 0; n < N; ++n) {
    if (!options.exclude.empty() && options.exclude[static_cast<size_t>(n)]) continue;
    for (Index t = 0; t < y.rows(); ++t) {
      const double e = std::min(lin(t, n) + var(t, n), options.exponent_cap);
      total += y(t, n) * lin(t, n) - std::exp(e);
    }
  }
  return total;
}

void validate_shapes(const SpikeData& data, const ModelParams& params,
                     const LatentPosterior& posterior) {
  const Index N = data.num_neurons();
  const Index L = params.num_latents();
  require(params.alpha.rows() == N, "alpha has the wrong number of rows");
  require(params.beta.rows() == N, "beta has the wrong number of rows");
  require(params.beta.cols() == 1 + data.history_order,
          "beta has the wrong number of columns for the history order");
  require(posterior.trials.size() == data.trials.size(),
          "posterior trial count does not match the data");
  for (size_t k = 0; k < data.trials.size(); ++k) {
    const auto& q = posterior.trials[k];
    const Index T = data.trials[k].rows();
    require(q.mu.rows() == T && q.mu.cols() == L && q.W.rows() == T &&
                q.W.cols() == L && q.V.rows() == T && q.V.cols() == L,
            "posterior shape mismatch on trial " + std::to_string(k));
  }
}

double elbo(const SpikeData& data, const std::vector<HistoryDesign>& history,
            const ModelParams& params, const LatentPosterior& posterior,
            const PriorFactors& factors, const ElboOptions& options) {
  validate_shapes(data, params, posterior);
  require(factors.num_latents() == params.num_latents(),
          "elbo: factor count does not match latent dimension");
  double total = 0;
  for (size_t k = 0; k < data.trials.size(); ++k) {
    const auto& q = posterior.trials[k];
    const Index T = data.trials[k].rows();
    total += expected_loglik(data.trials[k], q.mu, q.V, params, history[k], options);
    for (Index l = 0; l < params.num_latents(); ++l)
      total -= latent_kl(factors.basis(l, T), q.mu.col(l), q.W.col(l));
  }
  return total;
}

}  // namespace vlgp
