#include "vlgp/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <spdlog/spdlog.h>

#include "vlgp/simulate.hpp"

namespace vlgp {

namespace {

template <typename Body>
void parallel_for(Index count, Body&& body) {
  std::vector<std::exception_ptr> errors(static_cast<size_t>(count));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (Index i = 0; i < count; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[static_cast<size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_pairs(const std::vector<Matrix>& a, const std::vector<Matrix>& b, const char* what) {
  require(a.size() == b.size() && !a.empty(), std::string(what) + ": trial count mismatch");
  for (size_t k = 0; k < a.size(); ++k)
    require(a[k].rows() == b[k].rows() && a[k].cols() == b[k].cols(),
            std::string(what) + ": shape mismatch on trial " + std::to_string(k));
}

Vector ranks(const Vector& v) {
  const Index n = v.size();
  std::vector<Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Index i, Index j) { return v(i) < v(j); });
  Vector r(n);
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j + 1 < n && v(idx[j + 1]) == v(idx[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index m = i; m <= j; ++m) r(idx[m]) = avg;
    i = j + 1;
  }
  return r;
}

double pearson(const Vector& a, const Vector& b) {
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double den = std::sqrt(ac.squaredNorm() * bc.squaredNorm());
  if (!(den > 0)) return std::numeric_limits<double>::quiet_NaN();
  return ac.dot(bc) / den;
}

Matrix stack(const std::vector<Matrix>& xs) {
  Index rows = 0;
  for (const auto& x : xs) rows += x.rows();
  Matrix out(rows, xs.empty() ? 0 : xs.front().cols());
  Index off = 0;
  for (const auto& x : xs) {
    require(x.cols() == out.cols(), "stack: column mismatch");
    out.middleRows(off, x.rows()) = x;
    off += x.rows();
  }
  return out;
}

}  // namespace

void PredictionSet::validate() const {
  check_pairs(counts, rate, "PredictionSet");
  check_pairs(counts, eta, "PredictionSet");
  for (const auto& r : rate)
    require((r.array() > 0).all() && r.allFinite(), "PredictionSet: rates must be positive");
  require(ybar > 0, "PredictionSet: ybar must be positive");
}

double population_mean_rate(const std::vector<Matrix>& counts) {
  double total = 0, bins = 0;
  for (const auto& y : counts) {
    total += y.sum();
    bins += static_cast<double>(y.size());
  }
  require(bins > 0, "population_mean_rate: no bins");
  return total / bins;
}

PredictionSet lono_predict(const SpikeData& test, const ModelParams& params,
                           const PriorFactors& factors, const InferConfig& config) {
  test.validate();
  const Index N = test.num_neurons();
  require(N >= 2, "lono_predict: need at least two neurons");
  require(params.num_neurons() == N, "lono_predict: parameter/data neuron count mismatch");
  const auto history = build_history(test);

  PredictionSet out;
  out.counts = test.trials;
  for (const auto& y : test.trials) {
    out.rate.push_back(Matrix::Zero(y.rows(), N));
    out.eta.push_back(Matrix::Zero(y.rows(), N));
  }
  out.ybar = population_mean_rate(test.trials);

  parallel_for(N, [&](Index n) {
    std::vector<bool> mask(static_cast<size_t>(N), false);
    mask[static_cast<size_t>(n)] = true;
    const LatentPosterior post = infer_posterior(test, params, factors, config, mask);
    const Vector a = params.alpha.row(n).transpose();
    const Vector b = params.beta.row(n).transpose();
    for (size_t k = 0; k < test.trials.size(); ++k) {
      const auto& q = post.trials[k];
      const Vector eta = history[k].per_neuron[static_cast<size_t>(n)] * b + q.mu * a;
      const Vector var = 0.5 * q.V * a.cwiseAbs2();
      out.eta[k].col(n) = eta;
      out.rate[k].col(n) =
          (eta + var).array().min(config.exponent_cap).exp().matrix();
    }
  });
  return out;
}

double pll(const std::vector<Matrix>& counts, const std::vector<Matrix>& rate, double ybar) {
  check_pairs(counts, rate, "pll");
  require(ybar > 0, "pll: baseline rate must be positive");
  double model = 0, base = 0, spikes = 0;
  const double log_ybar = std::log(ybar);
  for (size_t k = 0; k < counts.size(); ++k) {
    const Matrix& y = counts[k];
    const Matrix& lam = rate[k];
    for (Index j = 0; j < y.size(); ++j) {
      const double yy = y(j), l = lam(j);
      if (!(l > 0)) throw NumericalError("pll: non-positive predicted rate");
      model += yy * std::log(l) - l;
      base += yy * log_ybar - ybar;
      spikes += yy;
    }
  }
  if (!(spikes > 0)) throw ValidationError("pll: no spikes, PLL is undefined");
  return (model - base) / (spikes * std::numbers::ln2);
}

double pll(const PredictionSet& pred) { return pll(pred.counts, pred.rate, pred.ybar); }

double rectified_rate_from_gaussian(double eta, double a) {
  require(a > 0, "rectified_rate_from_gaussian: a must be > 0");
  const double x = a * eta;
  // log1p(exp(x)) loses everything below ~-745; exp(x) is the exact tail.
  if (x < -30) return std::exp(x) / a;
  return softplus(x) / a;
}

double predictive_r2(const std::vector<Matrix>& y, const std::vector<Matrix>& eta) {
  check_pairs(y, eta, "predictive_r2");
  double sum = 0, count = 0;
  for (const auto& m : y) {
    sum += m.sum();
    count += static_cast<double>(m.size());
  }
  const double mean = sum / count;
  double sse = 0, sst = 0;
  for (size_t k = 0; k < y.size(); ++k) {
    sse += (y[k] - eta[k]).squaredNorm();
    sst += (y[k].array() - mean).square().sum();
  }
  if (!(sst > 0)) throw ValidationError("predictive_r2: observations are constant");
  return 1.0 - sse / sst;
}

double predictive_r2(const Matrix& y, const Matrix& eta) {
  return predictive_r2(std::vector<Matrix>{y}, std::vector<Matrix>{eta});
}

double spearman(const Vector& a, const Vector& b) {
  require(a.size() == b.size() && a.size() >= 2, "spearman: need two equal-length series");
  return pearson(ranks(a), ranks(b));
}

RankCorrelation rank_correlation(const Matrix& true_x, const Matrix& inferred_mu) {
  require(true_x.rows() == inferred_mu.rows() && true_x.rows() > inferred_mu.cols() + 1,
          "rank_correlation: need matching lengths longer than the latent dimension");
  const Index T = true_x.rows();
  auto standardize = [](Matrix m) {
    for (Index j = 0; j < m.cols(); ++j) {
      m.col(j).array() -= m.col(j).mean();
      const double sd = std::sqrt(m.col(j).squaredNorm() / static_cast<double>(m.rows()));
      if (sd > 0) m.col(j) /= sd;
    }
    return m;
  };
  const Matrix x = standardize(true_x);
  Matrix design(T, 1 + inferred_mu.cols());
  design.col(0).setOnes();
  design.rightCols(inferred_mu.cols()) = standardize(inferred_mu);
  const Matrix coef = design.colPivHouseholderQr().solve(x);
  const Matrix aligned = design * coef;

  RankCorrelation out;
  double total = 0;
  Index used = 0;
  for (Index j = 0; j < x.cols(); ++j) {
    const double rho = spearman(x.col(j), aligned.col(j));
    const bool bad = !std::isfinite(rho);
    out.rho.push_back(rho);
    out.excluded.push_back(bad);
    if (!bad) {
      total += std::abs(rho);
      ++used;
    }
  }
  if (used == 0) throw ValidationError("rank_correlation: every dimension is constant");
  out.mean_abs = total / static_cast<double>(used);
  return out;
}

RankCorrelation rank_correlation(const std::vector<Matrix>& true_x,
                                 const std::vector<Matrix>& inferred_mu) {
  require(true_x.size() == inferred_mu.size() && !true_x.empty(),
          "rank_correlation: trial count mismatch");
  return rank_correlation(stack(true_x), stack(inferred_mu));
}

double pseudo_r2(double ll_model, double ll_null, double ll_saturated) {
  const double den = ll_saturated - ll_null;
  if (!(den != 0)) throw ValidationError("pseudo_r2: saturated and null likelihoods coincide");
  return 1.0 - (ll_saturated - ll_model) / den;
}

namespace {

double poisson_ll(double y, double lam) {
  if (y == 0) return -lam;
  if (!(lam > 0)) return -std::numeric_limits<double>::infinity();
  return y * std::log(lam) - lam;
}

}  // namespace

double loglik_null(const std::vector<Matrix>& counts) {
  const double rate = population_mean_rate(counts);
  double ll = 0;
  for (const auto& y : counts)
    for (Index j = 0; j < y.size(); ++j) ll += poisson_ll(y(j), rate);
  return ll;
}

double loglik_saturated(const std::vector<Matrix>& counts) {
  require(!counts.empty(), "loglik_saturated: no trials");
  Matrix mean = Matrix::Zero(counts.front().rows(), counts.front().cols());
  for (const auto& y : counts) {
    require(y.rows() == mean.rows() && y.cols() == mean.cols(),
            "loglik_saturated: repeat trials must share a shape");
    mean += y;
  }
  mean /= static_cast<double>(counts.size());
  double ll = 0;
  for (const auto& y : counts)
    for (Index j = 0; j < y.size(); ++j) ll += poisson_ll(y(j), mean(j));
  return ll;
}

OrthogonalLatents orthogonalize_latents(const std::vector<Matrix>& mu, const Matrix& alpha,
                                        bool trial_average) {
  require(!mu.empty(), "orthogonalize_latents: no trials");
  const Index L = mu.front().cols();
  require(alpha.size() == 0 || alpha.cols() == L,
          "orthogonalize_latents: alpha must have L columns");
  bool same = true;
  for (const auto& m : mu) same = same && m.rows() == mu.front().rows() && m.cols() == L;
  Matrix M;
  if (trial_average && same) {
    M = Matrix::Zero(mu.front().rows(), L);
    for (const auto& m : mu) M += m;
    M /= static_cast<double>(mu.size());
  } else {
    M = stack(mu);
  }
  Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeThinV);
  Matrix R = svd.matrixV();
  for (Index j = 0; j < L; ++j) {
    Index imax = 0;
    R.col(j).cwiseAbs().maxCoeff(&imax);
    if (R(imax, j) < 0) R.col(j) *= -1;
  }
  OrthogonalLatents out;
  out.rotation = R;
  out.singular_values = svd.singularValues();
  for (const auto& m : mu) out.mu.push_back(m * R);
  if (alpha.size() > 0) out.alpha = alpha * R;
  return out;
}

double noise_corr_power(const Matrix& C_model, const Matrix& C_true) {
  require(C_model.rows() == C_true.rows() && C_model.cols() == C_true.cols() &&
              C_true.rows() == C_true.cols(),
          "noise_corr_power: matrices must be square and the same size");
  const double norm = C_true.norm();
  if (!(norm > 0)) throw ValidationError("noise_corr_power: C_true is zero");
  return 1.0 - (C_model - C_true).norm() / norm;
}

Matrix noise_correlation(const std::vector<Matrix>& counts, Index bin_group,
                         const std::vector<int>& conditions) {
  require(!counts.empty(), "noise_correlation: no trials");
  require(bin_group >= 1, "noise_correlation: bin_group must be >= 1");
  require(conditions.empty() || conditions.size() == counts.size(),
          "noise_correlation: one condition label per trial");
  const Index N = counts.front().cols();

  std::vector<Matrix> binned;
  for (const auto& y : counts) {
    require(y.cols() == N, "noise_correlation: neuron count mismatch");
    const Index B = y.rows() / bin_group;
    require(B >= 1, "noise_correlation: trial shorter than bin_group");
    Matrix r(B, N);
    for (Index b = 0; b < B; ++b) r.row(b) = y.middleRows(b * bin_group, bin_group).colwise().sum();
    binned.push_back(std::move(r));
  }

  std::vector<int> labels = conditions;
  if (labels.empty()) labels.assign(counts.size(), 0);
  std::vector<int> distinct = labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  for (int c : distinct) {
    Matrix mean;
    double n = 0;
    for (size_t k = 0; k < binned.size(); ++k) {
      if (labels[k] != c) continue;
      if (mean.size() == 0) mean = Matrix::Zero(binned[k].rows(), N);
      require(binned[k].rows() == mean.rows(),
              "noise_correlation: trials of one condition must share a length");
      mean += binned[k];
      n += 1;
    }
    mean /= n;
    for (size_t k = 0; k < binned.size(); ++k)
      if (labels[k] == c) binned[k] -= mean;
  }
  const Matrix resid = stack(binned);
  Matrix C = Matrix::Zero(N, N);
  const Matrix centered = resid.rowwise() - resid.colwise().mean();
  const Matrix cov = centered.transpose() * centered;
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < N; ++j) {
      if (i == j) continue;
      const double den = std::sqrt(cov(i, i) * cov(j, j));
      C(i, j) = den > 0 ? cov(i, j) / den : 0.0;
    }
  return C;
}

std::vector<Matrix> fitted_rates(const SpikeData& data, const ModelParams& params,
                                 const LatentPosterior& posterior, double cap) {
  validate_shapes(data, params, posterior);
  const auto history = build_history(data);
  std::vector<Matrix> out;
  for (size_t k = 0; k < data.trials.size(); ++k) {
    const auto& q = posterior.trials[k];
    const Matrix zero = Matrix::Zero(q.mu.rows(), q.mu.cols());
    out.push_back(expected_rates(q.mu, zero, params, history[k], cap));
  }
  return out;
}

Matrix noise_corr_from_rates(const std::vector<Matrix>& rates, Index n_sims, Index bin_group,
                             std::uint64_t seed, const std::vector<int>& conditions) {
  require(n_sims >= 1, "noise_corr_from_rates: n_sims must be >= 1");
  require(conditions.empty() || conditions.size() == rates.size(),
          "noise_corr_from_rates: one condition label per trial");
  std::vector<Matrix> sims;
  std::vector<int> labels;
  for (Index s = 0; s < n_sims; ++s) {
    for (size_t k = 0; k < rates.size(); ++k) {
      auto rng = make_rng(seed, static_cast<std::uint64_t>(s) * rates.size() + k, 3);
      Matrix y(rates[k].rows(), rates[k].cols());
      for (Index j = 0; j < y.size(); ++j) {
        const double lam = rates[k](j);
        y(j) = lam > 0 ? static_cast<double>(std::poisson_distribution<std::int64_t>(lam)(rng))
                       : 0.0;
      }
      sims.push_back(std::move(y));
      labels.push_back(conditions.empty() ? 0 : conditions[k]);
    }
  }
  return noise_correlation(sims, bin_group, labels);
}

Matrix noise_corr_from_model(const ModelParams& params, const LatentPosterior& posterior,
                             const SpikeData& data, Index n_sims, Index bin_group,
                             std::uint64_t seed, const std::vector<int>& conditions) {
  return noise_corr_from_rates(fitted_rates(data, params, posterior), n_sims, bin_group, seed,
                               conditions);
}

double subspace_angle(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows() && A.cols() >= 1 && B.cols() >= 1,
          "subspace_angle: spans must live in the same space");
  auto basis = [](const Matrix& M) {
    Eigen::ColPivHouseholderQR<Matrix> qr(M);
    const Index r = qr.rank();
    if (r == 0) throw ValidationError("subspace_angle: zero matrix");
    Matrix Q = qr.householderQ() * Matrix::Identity(M.rows(), r);
    return Q;
  };
  Matrix Qa = basis(A), Qb = basis(B);
  if (Qb.cols() > Qa.cols()) std::swap(Qa, Qb);
  // B now has the smaller span. Its residual after projecting on A carries
  // the sines of the principal angles.
  const Matrix cross = Qa.transpose() * Qb;
  Eigen::JacobiSVD<Matrix> cos_svd(cross);
  const double cos_min = std::clamp(cos_svd.singularValues().minCoeff(), 0.0, 1.0);
  if (cos_min > std::sqrt(0.5)) {
    const Matrix resid = Qb - Qa * cross;
    Eigen::JacobiSVD<Matrix> sin_svd(resid);
    return std::asin(std::clamp(sin_svd.singularValues().maxCoeff(), 0.0, 1.0));
  }
  return std::acos(cos_min);
}

LatentPosterior zero_posterior(const SpikeData& data, Index L) {
  LatentPosterior out;
  for (const auto& y : data.trials) {
    TrialPosterior q;
    q.mu = Matrix::Zero(y.rows(), L);
    q.W = Matrix::Zero(y.rows(), L);
    q.V = Matrix::Zero(y.rows(), L);
    out.trials.push_back(std::move(q));
  }
  return out;
}

ModelParams fit_glm(const SpikeData& data, Index L, const GlmOptions& options) {
  data.validate();
  require(L >= 1, "fit_glm: L must be >= 1");
  const Index N = data.num_neurons();
  const Index P = 1 + data.history_order;
  const auto history = build_history(data);
  ModelParams out;
  out.alpha = Matrix::Zero(N, L);
  out.beta = Matrix::Zero(N, P);

  parallel_for(N, [&](Index n) {
    auto loglik = [&](const Vector& b) {
      double ll = 0;
      for (size_t k = 0; k < data.trials.size(); ++k) {
        const Vector eta = history[k].per_neuron[static_cast<size_t>(n)] * b;
        const auto y = data.trials[k].col(n);
        for (Index t = 0; t < eta.size(); ++t)
          ll += y(t) * eta(t) - std::exp(std::min(eta(t), options.exponent_cap));
      }
      return ll;
    };
    Vector b = Vector::Zero(P);
    double total = 0, bins = 0;
    for (const auto& y : data.trials) {
      total += y.col(n).sum();
      bins += static_cast<double>(y.rows());
    }
    b(0) = std::log(std::max(total, 0.5) / bins);
    double f = loglik(b);
    for (Index it = 0; it < options.max_iter; ++it) {
      Vector grad = Vector::Zero(P);
      Matrix info = Matrix::Zero(P, P);
      for (size_t k = 0; k < data.trials.size(); ++k) {
        const Matrix& h = history[k].per_neuron[static_cast<size_t>(n)];
        const Vector lam = (h * b).array().min(options.exponent_cap).exp().matrix();
        grad.noalias() += h.transpose() * (data.trials[k].col(n) - lam);
        info.noalias() += h.transpose() * lam.asDiagonal() * h;
      }
      info.diagonal().array() += 1e-10;
      const Vector step = info.ldlt().solve(grad);
      if (!step.allFinite()) break;
      double scale = 1.0;
      bool moved = false;
      for (Index h = 0; h <= options.step_halving_max; ++h, scale *= 0.5) {
        const Vector cand = b + scale * step;
        const double fc = loglik(cand);
        if (fc >= f) {
          moved = (cand - b).cwiseAbs().maxCoeff() > options.tol;
          b = cand;
          f = fc;
          break;
        }
      }
      if (!moved) break;
    }
    out.beta.row(n) = b.transpose();
  });
  return out;
}

}  // namespace vlgp
