#include "vlgp/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <sstream>

#include <Eigen/Cholesky>

#include <spdlog/spdlog.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vlgp/init.hpp"

namespace vlgp {

namespace {


bool excluded(const std::vector<bool>& mask, Index n) {
  return !mask.empty() && mask[static_cast<size_t>(n)];
}

// Runs body(i) for i in [0, count), possibly in parallel, and rethrows the
// first exception in index order.
template <typename Body>
void parallel_for(Index count, Body&& body) {
  std::vector<std::exception_ptr> errors(static_cast<size_t>(count));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
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

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

void FitConfig::validate() const {
  require(L >= 1, "fit config: L must be >= 1");
  require(tol > 0, "fit config: tol must be > 0");
  require(max_iter >= 1, "fit config: max_iter must be >= 1");
  require(step_halving_max >= 0, "fit config: step_halving_max must be >= 0");
  require(hyper_every >= 1, "fit config: hyper_every must be >= 1");
  require(subsample_len >= 2, "fit config: subsample_len must be >= 2");
  require(n_subsamples >= 1, "fit config: n_subsamples must be >= 1");
  require(hyper_steps >= 0, "fit config: hyper_steps must be >= 0");
  require(exponent_cap > 0, "fit config: exponent_cap must be > 0");
  require(kernels.size() == 1 || static_cast<Index>(kernels.size()) == L,
          "fit config: need one kernel or one per latent");
  for (const auto& k : kernels) {
    k.validate();
    require(k.omega > 0, "fit config: kernel omega must be > 0");
  }
  require(factor.rel_tol > 0, "fit config: factor rel_tol must be > 0");
  require(factor.max_rank >= 1, "fit config: factor max_rank must be >= 1");
}

std::vector<KernelSpec> FitConfig::expanded_kernels() const {
  if (static_cast<Index>(kernels.size()) == L) return kernels;
  return std::vector<KernelSpec>(static_cast<size_t>(L), kernels.front());
}

Vector newton_mu_step(const PriorBasis& basis, const Vector& mu, const Vector& g,
                      const Vector& w, bool center) {
  const Matrix& G = basis.G();
  const Index r = G.cols();
  require(mu.size() == G.rows() && g.size() == G.rows() && w.size() == G.rows(),
          "newton_mu_step: length mismatch");
  Matrix H = Matrix::Identity(r, r);
  H.noalias() += G.transpose() * w.asDiagonal() * G;
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success)
    throw NumericalError("newton_mu_step: I + B is not positive definite");
  const Vector a = basis.coefficients(mu);
  Vector d = llt.solve(G.transpose() * g - a);
  if (center) {
    const Vector& c = basis.ones_coef();
    const Vector hc = llt.solve(c);
    d -= hc * (c.dot(d) / c.dot(hc));
  }
  return mu + G * d;
}

ConstrainResult constrain(ModelParams& params, LatentPosterior& posterior,
                          const PriorFactors* factors) {
  const Index L = params.num_latents();
  ConstrainResult out;
  for (auto& q : posterior.trials) {
    require(q.mu.cols() == L, "constrain: posterior latent count mismatch");
    for (Index l = 0; l < L; ++l) {
      if (factors) {
        q.mu.col(l) = factors->basis(l, q.mu.rows()).center(q.mu.col(l));
      } else {
        q.mu.col(l).array() -= q.mu.col(l).mean();
      }
    }
  }
  for (Index l = 0; l < L; ++l) {
    const double s = params.alpha.rows() > 0 ? params.alpha.col(l).cwiseAbs().maxCoeff() : 0.0;
    if (!(s > 0) || !std::isfinite(s)) {
      out.scales.push_back(1.0);
      out.zero_column.push_back(true);
      continue;
    }
    out.scales.push_back(s);
    out.zero_column.push_back(false);
    params.alpha.col(l) /= s;
    for (auto& q : posterior.trials) {
      q.mu.col(l) *= s;
      q.V.col(l) *= s * s;
      q.W.col(l) /= s * s;
    }
  }
  return out;
}

VariationalState::VariationalState(const SpikeData& data, ModelParams params,
                                   LatentPosterior posterior, PriorFactors factors,
                                   double exponent_cap, Index step_halving_max,
                                   std::vector<bool> exclude)
    : data_(&data),
      history_(build_history(data)),
      params_(std::move(params)),
      posterior_(std::move(posterior)),
      factors_(std::move(factors)),
      cap_(exponent_cap),
      halving_max_(step_halving_max),
      exclude_(std::move(exclude)) {
  validate_shapes(data, params_, posterior_);
  require(factors_.num_latents() == params_.num_latents(),
          "VariationalState: factor count does not match latent dimension");
  require(exclude_.empty() || static_cast<Index>(exclude_.size()) == data.num_neurons(),
          "VariationalState: neuron mask has the wrong length");
  factors_.ensure_lengths(data.lengths());
  refresh_rates();
}

void VariationalState::set_params(ModelParams params) {
  params_ = std::move(params);
  validate_shapes(*data_, params_, posterior_);
  refresh_rates();
}

void VariationalState::set_posterior(LatentPosterior posterior) {
  posterior_ = std::move(posterior);
  validate_shapes(*data_, params_, posterior_);
  refresh_rates();
}

void VariationalState::refresh_rates() {
  const Index K = data_->num_trials();
  rates_.resize(static_cast<size_t>(K));
  std::vector<std::uint64_t> hits(static_cast<size_t>(K), 0);
  parallel_for(K, [&](Index k) {
    const auto& q = posterior_.trials[static_cast<size_t>(k)];
    rates_[static_cast<size_t>(k)] = expected_rates(
        q.mu, q.V, params_, history_[static_cast<size_t>(k)], cap_,
        &hits[static_cast<size_t>(k)]);
  });
  for (auto h : hits) clamp_count_ += h;
}

double VariationalState::elbo() const {
  ElboOptions opts;
  opts.exponent_cap = cap_;
  opts.exclude = exclude_;
  return vlgp::elbo(*data_, history_, params_, posterior_, factors_, opts);
}

VariationalState::TrialEval VariationalState::evaluate_trial(Index k, const Matrix& mu,
                                                             const Matrix& V) const {
  const Matrix& y = data_->trials[static_cast<size_t>(k)];
  const HistoryDesign& h = history_[static_cast<size_t>(k)];
  TrialEval ev;
  Matrix lin = history_drive(params_, h);
  lin.noalias() += mu * params_.alpha.transpose();
  ev.rates = lin;
  ev.rates.noalias() += 0.5 * V * params_.alpha.cwiseAbs2().transpose();
  for (Index n = 0; n < y.cols(); ++n) {
    const bool skip = excluded(exclude_, n);
    for (Index t = 0; t < y.rows(); ++t) {
      double e = ev.rates(t, n);
      if (e > cap_) {
        e = cap_;
        ++ev.clamped;
      }
      const double lam = std::exp(e);
      ev.rates(t, n) = lam;
      if (!skip) ev.loglik += y(t, n) * lin(t, n) - lam;
    }
  }
  return ev;
}

StepStats VariationalState::newton_mu(Index l, bool center) {
  require(l >= 0 && l < params_.num_latents(), "newton_mu: latent index out of range");
  const Index K = data_->num_trials();
  const Index N = data_->num_neurons();
  std::vector<StepStats> stats(static_cast<size_t>(K));
  std::vector<std::uint64_t> hits(static_cast<size_t>(K), 0);

  Vector alpha_l = params_.alpha.col(l);
  Vector alpha_sq = alpha_l.cwiseAbs2();
  for (Index n = 0; n < N; ++n)
    if (excluded(exclude_, n)) {
      alpha_l(n) = 0;
      alpha_sq(n) = 0;
    }

  parallel_for(K, [&](Index k) {
    const size_t ks = static_cast<size_t>(k);
    auto& q = posterior_.trials[ks];
    const Matrix& y = data_->trials[ks];
    const Matrix& lam = rates_[ks];
    const PriorBasis& basis = factors_.basis(l, y.rows());
    const Matrix& G = basis.G();
    const Index r = G.cols();

    const Vector g = (y - lam) * alpha_l;
    const Vector w = lam * alpha_sq;
    Matrix H = Matrix::Identity(r, r);
    H.noalias() += G.transpose() * w.asDiagonal() * G;
    Eigen::LLT<Matrix> llt(H);
    if (llt.info() != Eigen::Success)
      throw NumericalError("newton_mu: I + B is not positive definite");
    const Vector a = basis.coefficients(q.mu.col(l));
    Vector d = llt.solve(G.transpose() * g - a);
    if (center) {
      const Vector& c = basis.ones_coef();
      const Vector hc = llt.solve(c);
      d -= hc * (c.dot(d) / c.dot(hc));
    }
    const Vector delta = G * d;
    if (!delta.allFinite()) {
      std::ostringstream msg;
      msg << "newton_mu: non-finite update for latent " << l << " on trial " << k;
      throw NumericalError(msg.str());
    }

    const double f_old = evaluate_trial(k, q.mu, q.V).loglik - 0.5 * a.squaredNorm();
    double step = 1.0;
    StepStats& st = stats[ks];
    for (Index h = 0; h <= halving_max_; ++h, step *= 0.5) {
      Matrix mu = q.mu;
      mu.col(l) += step * delta;
      TrialEval ev = evaluate_trial(k, mu, q.V);
      const double f_new = ev.loglik - 0.5 * (a + step * d).squaredNorm();
      if (f_new >= f_old) {
        q.mu = std::move(mu);
        rates_[ks] = std::move(ev.rates);
        hits[ks] += ev.clamped;
        ++st.accepted;
        return;
      }
      ++st.halvings;
    }
    ++st.rejected;
  });

  StepStats total;
  for (size_t k = 0; k < stats.size(); ++k) {
    total.accepted += stats[k].accepted;
    total.rejected += stats[k].rejected;
    total.halvings += stats[k].halvings;
    clamp_count_ += hits[k];
  }
  return total;
}

Vector VariationalState::gradient_mu(Index l, Index k) const {
  const size_t ks = static_cast<size_t>(k);
  const Matrix& y = data_->trials.at(ks);
  Vector alpha_l = params_.alpha.col(l);
  for (Index n = 0; n < alpha_l.size(); ++n)
    if (excluded(exclude_, n)) alpha_l(n) = 0;
  const auto& q = posterior_.trials[ks];
  return (y - rates_[ks]) * alpha_l - factors_.basis(l, y.rows()).precision_times(q.mu.col(l));
}

Vector VariationalState::gradient_alpha(Index n) const {
  const Vector alpha = params_.alpha.row(n).transpose();
  Vector grad = Vector::Zero(alpha.size());
  for (size_t k = 0; k < data_->trials.size(); ++k) {
    const auto& q = posterior_.trials[k];
    const Vector lam = rates_[k].col(n);
    grad.noalias() += q.mu.transpose() * (data_->trials[k].col(n) - lam);
    grad -= (q.V.transpose() * lam).cwiseProduct(alpha);
  }
  return grad;
}

Vector VariationalState::gradient_beta(Index n) const {
  Vector grad = Vector::Zero(params_.beta.cols());
  for (size_t k = 0; k < data_->trials.size(); ++k)
    grad.noalias() += history_[k].per_neuron[static_cast<size_t>(n)].transpose() *
                      (data_->trials[k].col(n) - rates_[k].col(n));
  return grad;
}

double VariationalState::neuron_loglik(Index n, const Vector& alpha_n, const Vector& beta_n,
                                       std::vector<Vector>* rates_out) const {
  double total = 0;
  const Vector alpha_sq = 0.5 * alpha_n.cwiseAbs2();
  if (rates_out) rates_out->resize(data_->trials.size());
  for (size_t k = 0; k < data_->trials.size(); ++k) {
    const auto& q = posterior_.trials[k];
    const Matrix& h = history_[k].per_neuron[static_cast<size_t>(n)];
    const Vector lin = h * beta_n + q.mu * alpha_n;
    const Vector var = q.V * alpha_sq;
    const auto y = data_->trials[k].col(n);
    Vector lam(lin.size());
    for (Index t = 0; t < lin.size(); ++t) {
      lam(t) = std::exp(std::min(lin(t) + var(t), cap_));
      total += y(t) * lin(t) - lam(t);
    }
    if (rates_out) (*rates_out)[k] = std::move(lam);
  }
  return total;
}

StepStats VariationalState::newton_alpha(Index n) {
  require(n >= 0 && n < data_->num_neurons(), "newton_alpha: neuron index out of range");
  const Index L = params_.num_latents();
  const Vector alpha = params_.alpha.row(n).transpose();
  const Vector beta = params_.beta.row(n).transpose();

  Vector grad = Vector::Zero(L);
  Matrix info = Matrix::Zero(L, L);  // negative Hessian
  for (size_t k = 0; k < data_->trials.size(); ++k) {
    const auto& q = posterior_.trials[k];
    const Vector lam = rates_[k].col(n);
    const auto y = data_->trials[k].col(n);
    const Vector vl = q.V.transpose() * lam;
    grad.noalias() += q.mu.transpose() * (y - lam);
    grad -= vl.cwiseProduct(alpha);
    const Matrix Z = q.mu + q.V * alpha.asDiagonal();
    info.noalias() += Z.transpose() * lam.asDiagonal() * Z;
    info.diagonal() += vl;
  }
  Eigen::LLT<Matrix> llt(info);
  if (llt.info() != Eigen::Success)
    throw NumericalError("newton_alpha: Hessian is not negative definite for neuron " +
                         std::to_string(n));
  const Vector delta = llt.solve(grad);
  if (!delta.allFinite())
    throw NumericalError("newton_alpha: non-finite update for neuron " + std::to_string(n));

  StepStats st;
  const double f_old = neuron_loglik(n, alpha, beta, nullptr);
  double step = 1.0;
  for (Index h = 0; h <= halving_max_; ++h, step *= 0.5) {
    const Vector cand = alpha + step * delta;
    std::vector<Vector> lam;
    const double f_new = neuron_loglik(n, cand, beta, &lam);
    if (f_new >= f_old) {
      params_.alpha.row(n) = cand.transpose();
      for (size_t k = 0; k < lam.size(); ++k) rates_[k].col(n) = lam[k];
      ++st.accepted;
      return st;
    }
    ++st.halvings;
  }
  ++st.rejected;
  return st;
}

StepStats VariationalState::newton_beta(Index n) {
  require(n >= 0 && n < data_->num_neurons(), "newton_beta: neuron index out of range");
  const Index P = params_.beta.cols();
  const Vector alpha = params_.alpha.row(n).transpose();
  const Vector beta = params_.beta.row(n).transpose();

  Vector grad = Vector::Zero(P);
  Matrix info = Matrix::Zero(P, P);
  for (size_t k = 0; k < data_->trials.size(); ++k) {
    const Matrix& h = history_[k].per_neuron[static_cast<size_t>(n)];
    const Vector lam = rates_[k].col(n);
    grad.noalias() += h.transpose() * (data_->trials[k].col(n) - lam);
    info.noalias() += h.transpose() * lam.asDiagonal() * h;
  }
  Vector delta = Vector::Zero(P);
  Eigen::LDLT<Matrix> ldlt(info);
  if (ldlt_usable(ldlt)) {
    delta = ldlt.solve(grad);
  } else {
    // History columns carry no information (e.g. a silent neuron): bias only.
    delta(0) = grad(0) / info(0, 0);
  }
  if (!delta.allFinite())
    throw NumericalError("newton_beta: non-finite update for neuron " + std::to_string(n));

  StepStats st;
  const double f_old = neuron_loglik(n, alpha, beta, nullptr);
  double step = 1.0;
  for (Index h = 0; h <= halving_max_; ++h, step *= 0.5) {
    const Vector cand = beta + step * delta;
    std::vector<Vector> lam;
    const double f_new = neuron_loglik(n, alpha, cand, &lam);
    if (f_new >= f_old) {
      params_.beta.row(n) = cand.transpose();
      for (size_t k = 0; k < lam.size(); ++k) rates_[k].col(n) = lam[k];
      ++st.accepted;
      return st;
    }
    ++st.halvings;
  }
  ++st.rejected;
  return st;
}

void VariationalState::update_W_and_V() {
  const Index L = params_.num_latents();
  const Index N = data_->num_neurons();
  Matrix alpha_sq = params_.alpha.cwiseAbs2();
  for (Index n = 0; n < N; ++n)
    if (excluded(exclude_, n)) alpha_sq.row(n).setZero();
  const Index K = data_->num_trials();
  parallel_for(K, [&](Index k) {
    auto& q = posterior_.trials[static_cast<size_t>(k)];
    q.W = rates_[static_cast<size_t>(k)] * alpha_sq;
    for (Index l = 0; l < L; ++l)
      q.V.col(l) = posterior_variance(factors_.basis(l, q.W.rows()), q.W.col(l));
  });
  refresh_rates();
}

void VariationalState::recompute_variance(Index l) {
  const Index K = data_->num_trials();
  parallel_for(K, [&](Index k) {
    auto& q = posterior_.trials[static_cast<size_t>(k)];
    q.V.col(l) = posterior_variance(factors_.basis(l, q.W.rows()), q.W.col(l));
  });
}

StepStats VariationalState::update_W_and_V_guarded() {
  StepStats st;
  const double before = elbo();
  const LatentPosterior old = posterior_;
  update_W_and_V();
  if (elbo() >= before) {
    ++st.accepted;
    return st;
  }
  std::vector<Matrix> target;
  for (const auto& q : posterior_.trials) target.push_back(q.W);
  double step = 0.5;
  for (Index h = 1; h <= halving_max_; ++h, step *= 0.5) {
    ++st.halvings;
    for (size_t k = 0; k < posterior_.trials.size(); ++k) {
      auto& q = posterior_.trials[k];
      q.W = old.trials[k].W + step * (target[k] - old.trials[k].W);
    }
    for (Index l = 0; l < params_.num_latents(); ++l) recompute_variance(l);
    refresh_rates();
    if (elbo() >= before) {
      ++st.accepted;
      return st;
    }
  }
  posterior_ = old;
  refresh_rates();
  ++st.rejected;
  return st;
}

std::vector<double> VariationalState::constrain() {
  ConstrainResult res = vlgp::constrain(params_, posterior_, &factors_);
  for (Index l = 0; l < params_.num_latents(); ++l)
    if (!res.zero_column[static_cast<size_t>(l)])
      factors_.rescale(l, res.scales[static_cast<size_t>(l)]);
  refresh_rates();
  return res.scales;
}

bool VariationalState::update_hyper(Index l, std::mt19937_64& rng, Index window_len,
                                    Index n_windows, Index steps) {
  const KernelSpec start = factors_.kernel(l);
  const double jitter = default_dense_jitter(start);
  const auto windows =
      draw_hyper_windows(posterior_, l, start, jitter, window_len, n_windows, rng);
  if (windows.empty()) {
    spdlog::warn("update_hyper: no usable windows for latent {}", l);
    return false;
  }
  const KernelSpec proposal = optimize_hyper(windows, start, jitter, steps);
  if (proposal.sigma2 == start.sigma2 && proposal.omega == start.omega) return false;

  const double before = elbo();
  const PriorFactors old_factors = factors_;
  const LatentPosterior old_posterior = posterior_;
  double step = 1.0;
  for (Index h = 0; h <= halving_max_; ++h, step *= 0.5) {
    KernelSpec cand = start;
    cand.sigma2 = std::exp(std::log(start.sigma2) +
                           step * (std::log(proposal.sigma2) - std::log(start.sigma2)));
    cand.omega = std::exp(std::log(start.omega) +
                          step * (std::log(proposal.omega) - std::log(start.omega)));
    factors_.set_kernel(l, cand);
    for (size_t k = 0; k < posterior_.trials.size(); ++k) {
      auto& q = posterior_.trials[k];
      const PriorBasis& basis = factors_.basis(l, q.mu.rows());
      q.mu.col(l) = basis.center(basis.project(old_posterior.trials[k].mu.col(l)));
      q.V.col(l) = posterior_variance(basis, q.W.col(l));
    }
    refresh_rates();
    if (elbo() >= before) return true;
  }
  factors_ = old_factors;
  posterior_ = old_posterior;
  refresh_rates();
  return false;
}

std::vector<HyperWindow> draw_hyper_windows(const LatentPosterior& posterior, Index l,
                                            const KernelSpec& spec, double jitter,
                                            Index window_len, Index n_windows,
                                            std::mt19937_64& rng) {
  require(!posterior.trials.empty(), "draw_hyper_windows: empty posterior");
  require(window_len >= 1 && n_windows >= 0, "draw_hyper_windows: bad window settings");
  std::vector<HyperWindow> out;
  std::uniform_int_distribution<size_t> pick_trial(0, posterior.trials.size() - 1);
  KernelSpec jittered = spec;
  jittered.jitter = jitter;
  for (Index i = 0; i < n_windows; ++i) {
    const auto& q = posterior.trials[pick_trial(rng)];
    const Index T = q.mu.rows();
    const Index len = std::min(window_len, T);
    std::uniform_int_distribution<Index> pick_start(0, T - len);
    const Index start = pick_start(rng);

    const Matrix K = dense_kernel(len, jittered);
    Eigen::LLT<Matrix> kllt(K);
    if (kllt.info() != Eigen::Success) {
      spdlog::warn("update_hyper: windowed kernel not positive definite; skipping window");
      continue;
    }
    HyperWindow w;
    w.mu = q.mu.col(l).segment(start, len);
    const Vector s = q.W.col(l).segment(start, len).cwiseMax(0.0).cwiseSqrt();
    // Sigma = K - K S (I + S K S)^-1 S K with S = diag(sqrt(W)).
    Matrix inner = s.asDiagonal() * K * s.asDiagonal();
    inner.diagonal().array() += 1.0;
    Eigen::LLT<Matrix> illt(inner);
    const Matrix SK = s.asDiagonal() * K;
    w.sigma = K - SK.transpose() * illt.solve(SK);
    w.sigma = 0.5 * (w.sigma + w.sigma.transpose());
    Eigen::LLT<Matrix> sllt(w.sigma);
    if (illt.info() != Eigen::Success || sllt.info() != Eigen::Success) {
      spdlog::warn("update_hyper: windowed posterior not positive definite; skipping window");
      continue;
    }
    const Matrix& Ls = sllt.matrixLLT();
    for (Index t = 0; t < len; ++t) w.logdet_sigma += 2.0 * std::log(Ls(t, t));
    out.push_back(std::move(w));
  }
  return out;
}

double hyper_objective(const std::vector<HyperWindow>& windows, const KernelSpec& spec,
                       double jitter) {
  KernelSpec jittered = spec;
  jittered.jitter = jitter;
  double total = 0;
  for (const auto& w : windows) {
    const Index T = w.mu.size();
    Eigen::LLT<Matrix> llt(dense_kernel(T, jittered));
    if (llt.info() != Eigen::Success)
      return -std::numeric_limits<double>::infinity();
    const Matrix& L = llt.matrixLLT();
    double logdet_k = 0;
    for (Index t = 0; t < T; ++t) logdet_k += 2.0 * std::log(L(t, t));
    const double quad = w.mu.dot(llt.solve(w.mu));
    const double trace = llt.solve(w.sigma).trace();
    total += -0.5 * (quad + trace - (w.logdet_sigma - logdet_k) - static_cast<double>(T));
  }
  return total;
}

Eigen::Vector2d hyper_gradient(const std::vector<HyperWindow>& windows,
                               const KernelSpec& spec, double jitter) {
  KernelSpec jittered = spec;
  jittered.jitter = jitter;
  Eigen::Vector2d grad = Eigen::Vector2d::Zero();
  for (const auto& w : windows) {
    const Index T = w.mu.size();
    Eigen::LLT<Matrix> llt(dense_kernel(T, jittered));
    if (llt.info() != Eigen::Success)
      throw NumericalError("hyper_gradient: kernel not positive definite");
    const Matrix kinv = llt.solve(Matrix::Identity(T, T));
    const Vector km = kinv * w.mu;
    // dL/dK = 0.5 (K^-1 mu mu^T K^-1 + K^-1 Sigma K^-1 - K^-1)
    Matrix dl = km * km.transpose();
    dl.noalias() += kinv * w.sigma * kinv;
    dl -= kinv;
    dl *= 0.5;
    const KernelLogGrads dk = kernel_log_grads(T, spec);
    grad(0) += dl.cwiseProduct(dk.d_log_sigma2).sum();
    grad(1) += dl.cwiseProduct(dk.d_log_omega).sum();
  }
  return grad;
}

KernelSpec optimize_hyper(const std::vector<HyperWindow>& windows, KernelSpec spec,
                          double jitter, Index steps) {
  constexpr double kLogOmegaMin = -18.42;  // ~1e-8
  constexpr double kLogOmegaMax = 0.0;
  constexpr double kLogSigmaMin = -13.8;
  constexpr double kLogSigmaMax = 13.8;
  Eigen::Vector2d theta(std::log(spec.sigma2), std::log(spec.omega));
  auto to_spec = [&](const Eigen::Vector2d& th) {
    KernelSpec s = spec;
    s.sigma2 = std::exp(th(0));
    s.omega = std::exp(th(1));
    return s;
  };
  double value = hyper_objective(windows, spec, jitter);
  double rate = 1.0;
  for (Index it = 0; it < steps; ++it) {
    const Eigen::Vector2d g = hyper_gradient(windows, to_spec(theta), jitter);
    const double norm = g.norm();
    if (!(norm > 0) || !std::isfinite(norm)) break;
    bool moved = false;
    for (int h = 0; h < 30; ++h, rate *= 0.5) {
      Eigen::Vector2d cand = theta + rate * g / norm;
      cand(0) = std::clamp(cand(0), kLogSigmaMin, kLogSigmaMax);
      cand(1) = std::clamp(cand(1), kLogOmegaMin, kLogOmegaMax);
      const double v = hyper_objective(windows, to_spec(cand), jitter);
      if (v > value) {
        theta = cand;
        value = v;
        moved = true;
        break;
      }
    }
    if (!moved) break;
    rate = std::min(1.0, 2.0 * rate);
  }
  return to_spec(theta);
}

LatentPosterior prior_posterior(const SpikeData& data, const PriorFactors& factors) {
  LatentPosterior out;
  const Index L = factors.num_latents();
  for (const auto& y : data.trials) {
    const Index T = y.rows();
    TrialPosterior q;
    q.mu = Matrix::Zero(T, L);
    q.W = Matrix::Zero(T, L);
    q.V.resize(T, L);
    for (Index l = 0; l < L; ++l)
      q.V.col(l) = factors.basis(l, T).G().cwiseAbs2().rowwise().sum();
    out.trials.push_back(std::move(q));
  }
  return out;
}

namespace {

struct Snapshot {
  std::vector<Matrix> mu;
  Matrix alpha;
  Matrix beta;
};

Snapshot snapshot(const VariationalState& s) {
  Snapshot out;
  for (const auto& q : s.posterior().trials) out.mu.push_back(q.mu);
  out.alpha = s.params().alpha;
  out.beta = s.params().beta;
  return out;
}

double change(const Snapshot& a, const Snapshot& b) {
  double m = std::max(max_abs_diff(a.alpha, b.alpha), max_abs_diff(a.beta, b.beta));
  for (size_t k = 0; k < a.mu.size(); ++k) m = std::max(m, max_abs_diff(a.mu[k], b.mu[k]));
  return m;
}

}  // namespace

FitResult fit(const SpikeData& data, const FitConfig& config,
              const IterationCallback& callback) {
  data.validate();
  config.validate();
  const Index L = config.L;
  const Index N = data.num_neurons();
  require(L < N, "fit: latent dimension must be smaller than the neuron count");
#ifdef _OPENMP
  if (config.threads > 0) omp_set_num_threads(config.threads);
#endif

  PriorFactors factors(config.expanded_kernels(), config.factor, data.lengths());
  const auto history = build_history(data);

  // Loadings and latent means by factor analysis; bias and history weights
  // by least squares.
  FAResult fa = factor_analysis(data, L);
  ModelParams params;
  params.alpha = fa.loading;
  for (Index l = 0; l < L; ++l) {
    const double s = params.alpha.col(l).cwiseAbs().maxCoeff();
    if (s > 0) params.alpha.col(l) /= s;
  }
  params.beta = init_history_weights(data, history).beta;

  LatentPosterior posterior = prior_posterior(data, factors);
  for (size_t k = 0; k < data.trials.size(); ++k) {
    auto& q = posterior.trials[k];
    for (Index l = 0; l < L; ++l) {
      const PriorBasis& basis = factors.basis(l, q.mu.rows());
      q.mu.col(l) = basis.center(basis.project(fa.latent_mean[k].col(l)));
    }
  }

  VariationalState state(data, std::move(params), std::move(posterior), std::move(factors),
                         config.exponent_cap, config.step_halving_max);
  state.update_W_and_V();

  FitReport report;
  report.elbo_trace.push_back(state.elbo());
  if (!std::isfinite(report.elbo_trace.back()))
    throw NumericalError("fit: initial ELBO is not finite");
  std::mt19937_64 rng(config.seed);

  for (Index iter = 1; iter <= config.max_iter; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    const Snapshot before = snapshot(state);
    Index rejected = 0;
    try {
      for (Index l = 0; l < L; ++l) rejected += state.newton_mu(l).rejected;

      std::vector<StepStats> per_neuron(static_cast<size_t>(N));
      // Neuron updates are independent given the posterior.
      parallel_for(N, [&](Index n) {
        StepStats a = state.newton_alpha(n);
        StepStats b = state.newton_beta(n);
        per_neuron[static_cast<size_t>(n)].rejected = a.rejected + b.rejected;
      });
      for (const auto& s : per_neuron) rejected += s.rejected;

      state.constrain();
      rejected += state.update_W_and_V_guarded().rejected;

      if (config.learn_hyper && iter % config.hyper_every == 0) {
        for (Index l = 0; l < L; ++l)
          state.update_hyper(l, rng, config.subsample_len, config.n_subsamples,
                             config.hyper_steps);
        report.hyper_trace.push_back(state.factors().kernels());
      }
    } catch (const NumericalError& e) {
      std::ostringstream msg;
      msg << "fit: iteration " << iter << ": " << e.what();
      throw NumericalError(msg.str());
    }

    const double value = state.elbo();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "fit: iteration " << iter << ": ELBO is not finite";
      throw NumericalError(msg.str());
    }
    report.elbo_trace.push_back(value);
    report.rejected_steps.push_back(rejected);
    report.iterations = iter;
    const double delta = change(before, snapshot(state));
    report.wall_time.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    spdlog::info("fit: iter {} elbo {:.6f} change {:.3e} rejected {}", iter, value, delta,
                  rejected);
    if (callback) callback(iter, state);
    if (delta < config.tol) {
      report.converged = true;
      break;
    }
  }
  report.clamp_count = state.clamp_count();

  FitResult out;
  out.params = state.params();
  out.posterior = state.posterior();
  out.factors = state.factors();
  out.report = std::move(report);
  return out;
}

LatentPosterior infer_posterior(const SpikeData& data, const ModelParams& params,
                                const PriorFactors& factors, const InferConfig& config,
                                const std::vector<bool>& exclude) {
  data.validate();
  require(config.tol > 0 && config.max_iter >= 1, "infer_posterior: bad config");
  require(params.num_neurons() == data.num_neurons(),
          "infer_posterior: parameters and data disagree on the neuron count");
  require(params.history_order() == data.history_order,
          "infer_posterior: parameters and data disagree on the history order");
  PriorFactors local = factors;
  local.ensure_lengths(data.lengths());
  LatentPosterior start = prior_posterior(data, local);
  VariationalState state(data, params, std::move(start), std::move(local),
                         config.exponent_cap, config.step_halving_max, exclude);
  state.update_W_and_V();
  for (Index iter = 0; iter < config.max_iter; ++iter) {
    std::vector<Matrix> before;
    for (const auto& q : state.posterior().trials) before.push_back(q.mu);
    for (Index l = 0; l < params.num_latents(); ++l) state.newton_mu(l, config.center);
    state.update_W_and_V_guarded();
    double delta = 0;
    for (size_t k = 0; k < before.size(); ++k)
      delta = std::max(delta, max_abs_diff(before[k], state.posterior().trials[k].mu));
    if (delta < config.tol) break;
  }
  return state.posterior();
}

LatentPosterior infer_posterior(const SpikeData& data, const ModelParams& params,
                                const std::vector<KernelSpec>& kernels,
                                const FactorOptions& factor, const InferConfig& config,
                                const std::vector<bool>& exclude) {
  PriorFactors factors(kernels, factor, data.lengths());
  return infer_posterior(data, params, factors, config, exclude);
}

}  // namespace vlgp
