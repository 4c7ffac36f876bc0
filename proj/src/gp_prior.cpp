#include "vlgp/gp_prior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace vlgp {

void KernelSpec::validate() const {
  require(std::isfinite(sigma2) && sigma2 > 0, "kernel sigma2 must be > 0");
  require(std::isfinite(omega) && omega >= 0, "kernel omega must be >= 0");
  require(std::isfinite(jitter) && jitter >= 0, "kernel jitter must be >= 0");
}

double sq_exp_cov(Index t, Index s, const KernelSpec& spec) {
  const double d = static_cast<double>(t - s);
  double k = spec.sigma2 * std::exp(-spec.omega * d * d);
  if (t == s) k += spec.jitter;
  return k;
}

Matrix squared_distance(Index T) {
  Matrix D(T, T);
  for (Index s = 0; s < T; ++s)
    for (Index t = 0; t < T; ++t) {
      const double d = static_cast<double>(t - s);
      D(t, s) = d * d;
    }
  return D;
}

Matrix dense_kernel(Index T, const KernelSpec& spec) {
  Matrix K(T, T);
  for (Index s = 0; s < T; ++s)
    for (Index t = 0; t < T; ++t) K(t, s) = sq_exp_cov(t, s, spec);
  return K;
}

CholFactor incomplete_cholesky(Index T, const KernelSpec& spec, double tol,
                               Index max_rank) {
  spec.validate();
  require(T >= 1, "incomplete_cholesky: T must be >= 1");
  require(tol > 0, "incomplete_cholesky: tol must be > 0");
  require(max_rank >= 1 && max_rank <= T,
          "incomplete_cholesky: max_rank must be in [1, T]");

  // Rounding can push residual diagonals slightly below zero; anything past
  // this floor means the kernel evaluation is not positive semidefinite.
  const double floor = -(spec.jitter + 1e-9 * (spec.sigma2 + spec.jitter));

  const double tiny = 1e-150 * std::sqrt(spec.sigma2 + spec.jitter);

  Matrix G(T, max_rank);
  Vector diag = Vector::Constant(T, spec.sigma2 + spec.jitter);
  std::vector<char> used(static_cast<size_t>(T), 0);
  CholFactor out;
  double residual = diag.sum();

  Vector column(T);
  Index k = 0;
  for (; k < max_rank && residual > tol; ++k) {
    Index pivot = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < T; ++i) {
      if (diag(i) > best) {
        best = diag(i);
        pivot = i;
      }
    }
    if (best < floor) {
      std::ostringstream msg;
      msg << "incomplete_cholesky: negative pivot " << best << " at rank " << k;
      throw NumericalError(msg.str());
    }
    if (best <= 0) break;

    const double root = std::sqrt(best);
    for (Index i = 0; i < T; ++i) column(i) = sq_exp_cov(i, pivot, spec);
    if (k > 0) column.noalias() -= G.leftCols(k) * G.row(pivot).head(k).transpose();
    column /= root;
    // flush far tails to zero: subnormals make every later product slow
    for (Index i = 0; i < T; ++i)
      if (used[static_cast<size_t>(i)] || std::abs(column(i)) < tiny) column(i) = 0.0;
    column(pivot) = root;
    G.col(k) = column;

    used[static_cast<size_t>(pivot)] = 1;
    out.pivots.push_back(pivot);
    residual = 0;
    for (Index i = 0; i < T; ++i) {
      if (used[static_cast<size_t>(i)]) {
        diag(i) = 0;
        continue;
      }
      diag(i) -= column(i) * column(i);
      if (diag(i) < floor) {
        std::ostringstream msg;
        msg << "incomplete_cholesky: residual diagonal " << diag(i)
            << " below floor at rank " << k + 1;
        throw NumericalError(msg.str());
      }
      residual += std::max(diag(i), 0.0);
    }
  }

  out.G = G.leftCols(k);
  out.rank = k;
  out.residual_trace = residual;
  return out;
}

KernelLogGrads kernel_log_grads(Index T, const KernelSpec& spec) {
  KernelSpec bare = spec;
  bare.jitter = 0;
  KernelLogGrads g;
  g.d_log_sigma2 = dense_kernel(T, bare);
  g.d_log_omega = -spec.omega * squared_distance(T).cwiseProduct(g.d_log_sigma2);
  return g;
}

PriorBasis::PriorBasis(CholFactor factor) : factor_(std::move(factor)) {
  qr_.compute(factor_.G);
  const Index T = factor_.G.rows();
  const Vector ones = Vector::Ones(T);
  ones_coef_ = factor_.G.transpose() * ones;
  const Vector projected = factor_.G * qr_.solve(ones);
  const double m = projected.mean();
  if (!(std::abs(m) > 0))
    throw NumericalError("PriorBasis: constant vector orthogonal to prior span");
  center_direction_ = projected / m;
}

Vector PriorBasis::coefficients(const Vector& mu) const {
  require(mu.size() == length(), "PriorBasis::coefficients: length mismatch");
  return qr_.solve(mu);
}

Vector PriorBasis::project(const Vector& mu) const {
  return factor_.G * coefficients(mu);
}

Vector PriorBasis::precision_times(const Vector& mu) const {
  const Index r = factor_.G.cols();
  const Vector a = coefficients(mu);
  Vector b = Vector::Zero(length());
  b.head(r) = qr_.matrixQR().topLeftCorner(r, r).triangularView<Eigen::Upper>().transpose().solve(a);
  return qr_.householderQ() * b;
}

Vector PriorBasis::center(const Vector& mu) const {
  require(mu.size() == length(), "PriorBasis::center: length mismatch");
  return mu - mu.mean() * center_direction_;
}

PriorFactors::PriorFactors(std::vector<KernelSpec> kernels,
                           FactorOptions options,
                           const std::vector<Index>& lengths)
    : kernels_(std::move(kernels)), options_(options) {
  require(!kernels_.empty(), "PriorFactors: need at least one latent");
  require(options_.rel_tol > 0, "PriorFactors: rel_tol must be > 0");
  require(options_.max_rank >= 1, "PriorFactors: max_rank must be >= 1");
  for (const auto& k : kernels_) k.validate();
  bases_.resize(kernels_.size());
  ensure_lengths(lengths);
}

PriorBasis PriorFactors::build(const KernelSpec& spec, Index T) const {
  const double tol = options_.rel_tol * static_cast<double>(T) * spec.sigma2;
  const Index rank = std::min(T, options_.max_rank);
  return PriorBasis(incomplete_cholesky(T, spec, tol, rank));
}

void PriorFactors::ensure_lengths(const std::vector<Index>& lengths) {
  for (size_t l = 0; l < kernels_.size(); ++l)
    for (Index T : lengths)
      if (!bases_[l].count(T)) bases_[l].emplace(T, build(kernels_[l], T));
}

const PriorBasis& PriorFactors::basis(Index l, Index T) const {
  const auto& m = bases_.at(static_cast<size_t>(l));
  auto it = m.find(T);
  if (it == m.end())
    throw ValidationError("PriorFactors: no basis for trial length " +
                          std::to_string(T));
  return it->second;
}

void PriorFactors::set_kernel(Index l, const KernelSpec& spec) {
  spec.validate();
  auto& m = bases_.at(static_cast<size_t>(l));
  kernels_[static_cast<size_t>(l)] = spec;
  for (auto& [T, basis] : m) basis = build(spec, T);
}

void PriorFactors::rescale(Index l, double s) {
  require(std::isfinite(s) && s > 0, "PriorFactors::rescale: s must be > 0");
  auto& spec = kernels_.at(static_cast<size_t>(l));
  spec.sigma2 *= s * s;
  spec.jitter *= s * s;
  for (auto& [T, basis] : bases_[static_cast<size_t>(l)]) {
    CholFactor f = basis.factor();
    f.G *= s;
    f.residual_trace *= s * s;
    basis = PriorBasis(std::move(f));
  }
}

}  // namespace vlgp
