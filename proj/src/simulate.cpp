#include "vlgp/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <spdlog/spdlog.h>

namespace vlgp {

LatentKind parse_latent_kind(const std::string& name) {
  if (name == "gp") return LatentKind::gp;
  if (name == "lorenz") return LatentKind::lorenz;
  if (name == "lds") return LatentKind::lds;
  throw ValidationError("latent_kind: expected gp, lorenz or lds, got '" + name + "'");
}

std::string to_string(LatentKind kind) {
  switch (kind) {
    case LatentKind::gp: return "gp";
    case LatentKind::lorenz: return "lorenz";
    case LatentKind::lds: return "lds";
  }
  return "gp";
}

std::vector<double> default_history_filter() {
  return {-10, -10, -3, -3, -3, -3, -2, -2, -1, -1};
}

LdsSpec LdsSpec::rotating(Index L, double period, double decay) {
  require(L >= 1, "LdsSpec::rotating: L must be >= 1");
  LdsSpec s;
  // Rotation about the diagonal axis (Rodrigues), plain rotation for L = 2.
  Matrix R = Matrix::Identity(L, L);
  const double theta = 2.0 * std::numbers::pi / period;
  if (L == 2) {
    R << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  } else if (L >= 3) {
    Eigen::Vector3d k = Eigen::Vector3d::Ones().normalized();
    Eigen::Matrix3d kx;
    kx << 0, -k(2), k(1), k(2), 0, -k(0), -k(1), k(0), 0;
    R.topLeftCorner(3, 3) = Eigen::Matrix3d::Identity() + std::sin(theta) * kx +
                            (1 - std::cos(theta)) * kx * kx;
  }
  s.A = decay * R;
  s.b = Vector::Zero(L);
  s.Q = (1 - decay * decay) * Matrix::Identity(L, L);
  s.mu0 = Vector::Zero(L);
  s.Q0 = Matrix::Identity(L, L);
  return s;
}

void LdsSpec::validate() const {
  const Index L = A.rows();
  require(L >= 1 && A.cols() == L, "lds: A must be square");
  require(b.size() == L && mu0.size() == L, "lds: b and mu0 must have length L");
  require(Q.rows() == L && Q.cols() == L && Q0.rows() == L && Q0.cols() == L,
          "lds: Q and Q0 must be L x L");
  require(A.allFinite() && b.allFinite() && Q.allFinite() && mu0.allFinite() &&
              Q0.allFinite(),
          "lds: non-finite entries");
}

SimSpec SimSpec::defaults(LatentKind kind) {
  SimSpec s;
  s.latent_kind = kind;
  switch (kind) {
    case LatentKind::gp:
      s.L = 2;
      s.bias_mean = 0.0;
      s.bias_sd = 1.0;
      break;
    case LatentKind::lorenz:
      s.L = 3;
      s.history_filter = default_history_filter();
      s.loading_scale = 1.5;
      s.bias_mean = std::log(0.03);
      break;
    case LatentKind::lds:
      s.L = 3;
      s.lds = LdsSpec::rotating(3);
      s.loading_scale = 1.5;
      s.bias_mean = std::log(std::expm1(0.03));
      break;
  }
  return s;
}

Index SimSpec::latent_dim() const {
  if (latent_kind == LatentKind::lorenz) return 3;
  if (latent_kind == LatentKind::lds && lds.A.size() > 0) return lds.A.rows();
  return L;
}

void SimSpec::validate() const {
  require(N >= 1, "sim: N must be >= 1");
  require(T >= 2, "sim: T must be >= 2");
  require(trials >= 1, "sim: trials must be >= 1");
  require(latent_dim() >= 1, "sim: L must be >= 1");
  require(bin_width > 0, "sim: bin_width must be > 0");
  require(std::isfinite(loading_scale) && std::isfinite(bias_mean) && bias_sd >= 0,
          "sim: loading_scale, bias_mean must be finite and bias_sd >= 0");
  require(exponent_cap > 0, "sim: exponent_cap must be > 0");
  for (double f : history_filter) require(std::isfinite(f), "sim: non-finite history filter");
  switch (latent_kind) {
    case LatentKind::gp:
      kernel.validate();
      break;
    case LatentKind::lorenz:
      require(lorenz_dt > 0, "sim: lorenz_dt must be > 0");
      require(L == 3 || L == 0, "sim: lorenz latents are 3-dimensional");
      break;
    case LatentKind::lds:
      lds.validate();
      require(history_filter.empty(), "sim: lds data has no history filter");
      break;
  }
  const Index Ld = latent_dim();
  require(alpha.size() == 0 || (alpha.rows() == N && alpha.cols() == Ld),
          "sim: explicit alpha must be N x L");
  require(bias.size() == 0 || bias.size() == N, "sim: explicit bias must have length N");
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t trial, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

namespace {

Vector standard_normal(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Vector out(n);
  for (Index i = 0; i < n; ++i) out(i) = z(rng);
  return out;
}

// Square root factor S with S S^T = M for a symmetric PSD matrix.
Matrix psd_sqrt(const Matrix& M, const char* what) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (M + M.transpose()));
  if (eig.info() != Eigen::Success) throw NumericalError(std::string(what) + ": eigensolver failed");
  const Vector ev = eig.eigenvalues();
  const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  if (ev.minCoeff() < -1e-10 * scale)
    throw ValidationError(std::string(what) + " is not positive semidefinite");
  return eig.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

std::int64_t poisson_draw(double rate, std::mt19937_64& rng) {
  if (!(rate > 0)) return 0;
  if (!(rate <= 1e15)) throw NumericalError("poisson_draw: rate is not finite or too large");
  std::poisson_distribution<std::int64_t> pois(rate);
  return pois(rng);
}

}  // namespace

Matrix sample_gp_latent(Index T, Index L, const KernelSpec& spec, std::mt19937_64& rng) {
  require(T >= 1 && L >= 1, "sample_gp_latent: T and L must be >= 1");
  spec.validate();
  Matrix factor;
  if (T <= kDenseSampleLimit) {
    KernelSpec s = spec;
    double jitter = std::max(spec.jitter, 1e-10 * spec.sigma2);
    for (int attempt = 0;; ++attempt) {
      s.jitter = jitter;
      Eigen::LLT<Matrix> llt(dense_kernel(T, s));
      if (llt.info() == Eigen::Success) {
        factor = llt.matrixL();
        break;
      }
      if (attempt >= 8)
        throw NumericalError("sample_gp_latent: Cholesky failed after jitter escalation");
      jitter *= 10;
    }
  } else {
    factor = incomplete_cholesky(T, spec, 1e-10 * static_cast<double>(T) * spec.sigma2, T).G;
  }
  Matrix x(T, L);
  for (Index l = 0; l < L; ++l) x.col(l) = factor * standard_normal(factor.cols(), rng);
  return x;
}

Matrix sample_gp_latent(Index T, Index L, const KernelSpec& spec, std::uint64_t seed) {
  auto rng = make_rng(seed, 0, 1);
  return sample_gp_latent(T, L, spec, rng);
}

Eigen::Vector3d lorenz_derivative(const Eigen::Vector3d& s) {
  return Eigen::Vector3d(10.0 * (s(1) - s(0)), s(0) * (28.0 - s(2)) - s(1),
                         s(0) * s(1) - 2.667 * s(2));
}

Matrix lorenz_raw(Index T, double dt, const Eigen::Vector3d& x0, Index burn_in) {
  require(T >= 1 && dt > 0 && burn_in >= 0, "lorenz_raw: bad arguments");
  Eigen::Vector3d s = x0;
  auto rk4 = [&] {
    const Eigen::Vector3d k1 = lorenz_derivative(s);
    const Eigen::Vector3d k2 = lorenz_derivative(s + 0.5 * dt * k1);
    const Eigen::Vector3d k3 = lorenz_derivative(s + 0.5 * dt * k2);
    const Eigen::Vector3d k4 = lorenz_derivative(s + dt * k3);
    s += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  };
  for (Index i = 0; i < burn_in; ++i) rk4();
  Matrix out(T, 3);
  for (Index t = 0; t < T; ++t) {
    out.row(t) = s.transpose();
    rk4();
  }
  return out;
}

Matrix lorenz_trajectory(Index T, double dt, std::mt19937_64& rng) {
  require(T >= 2, "lorenz_trajectory: T must be >= 2");
  const Eigen::Vector3d x0 = Eigen::Vector3d(1, 1, 28) + standard_normal(3, rng);
  Matrix x = lorenz_raw(T, dt, x0);
  for (Index j = 0; j < 3; ++j) {
    x.col(j).array() -= x.col(j).mean();
    const double sd = std::sqrt(x.col(j).squaredNorm() / static_cast<double>(T));
    if (sd > 0) x.col(j) /= sd;
  }
  return x;
}

Matrix lorenz_trajectory(Index T, double dt, std::uint64_t seed) {
  auto rng = make_rng(seed, 0, 1);
  return lorenz_trajectory(T, dt, rng);
}

Matrix lds_trajectory(const LdsSpec& spec, Index T, std::mt19937_64& rng) {
  spec.validate();
  require(T >= 1, "lds_trajectory: T must be >= 1");
  const Index L = spec.A.rows();
  const double rho = spec.A.eigenvalues().cwiseAbs().maxCoeff();
  if (rho > 1.0) spdlog::warn("lds_trajectory: spectral radius of A is {} > 1", rho);
  const Matrix sq = psd_sqrt(spec.Q, "lds: Q");
  const Matrix sq0 = psd_sqrt(spec.Q0, "lds: Q0");
  Matrix x(T, L);
  Vector s = spec.mu0 + sq0 * standard_normal(L, rng);
  x.row(0) = s.transpose();
  for (Index t = 1; t < T; ++t) {
    s = spec.A * s + spec.b + sq * standard_normal(L, rng);
    x.row(t) = s.transpose();
  }
  if (!x.allFinite()) throw NumericalError("lds_trajectory: state diverged to a non-finite value");
  return x;
}

Matrix lds_trajectory(const LdsSpec& spec, Index T, std::uint64_t seed) {
  auto rng = make_rng(seed, 0, 1);
  return lds_trajectory(spec, T, rng);
}

Matrix history_weights_from_filter(const Vector& bias, const std::vector<double>& filter) {
  const Index p = static_cast<Index>(filter.size());
  Matrix beta(bias.size(), 1 + p);
  beta.col(0) = bias;
  for (Index j = 0; j < p; ++j)
    beta.col(1 + j).setConstant(filter[static_cast<size_t>(p - 1 - j)]);
  return beta;
}

Matrix generate_spikes_pp(const Matrix& x, const ModelParams& params, std::mt19937_64& rng,
                          double cap, SpikeStats* stats) {
  const Index T = x.rows();
  const Index N = params.alpha.rows();
  const Index p = params.history_order();
  require(params.alpha.cols() == x.cols(), "generate_spikes_pp: alpha/latent mismatch");
  require(params.beta.rows() == N && p >= 0, "generate_spikes_pp: beta must be N x (1+p)");
  const Matrix drive = x * params.alpha.transpose();
  Matrix y = Matrix::Zero(T, N);
  for (Index t = 0; t < T; ++t) {
    for (Index n = 0; n < N; ++n) {
      double e = drive(t, n) + params.beta(n, 0);
      // beta column j >= 1 multiplies lag p - j + 1.
      for (Index j = 1; j <= p; ++j) {
        const Index s = t - (p - j + 1);
        if (s >= 0) e += params.beta(n, j) * y(s, n);
      }
      if (e > cap) {
        e = cap;
        if (stats) ++stats->clamped;
      }
      y(t, n) = static_cast<double>(poisson_draw(std::exp(e), rng));
      if (stats && y(t, n) > 1) ++stats->multi_spike_bins;
    }
  }
  return y;
}

Matrix generate_spikes_pp(const Matrix& x, const ModelParams& params, std::uint64_t seed,
                          double cap, SpikeStats* stats) {
  auto rng = make_rng(seed, 0, 2);
  return generate_spikes_pp(x, params, rng, cap, stats);
}

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Matrix generate_spikes_lds_poisson(const Matrix& x, const Matrix& C, const Vector& d,
                                   std::mt19937_64& rng, SpikeStats* stats) {
  require(C.cols() == x.cols() && C.rows() == d.size(),
          "generate_spikes_lds_poisson: C must be N x L and d length N");
  const Matrix eta = (x * C.transpose()).rowwise() + d.transpose();
  Matrix y(eta.rows(), eta.cols());
  for (Index t = 0; t < eta.rows(); ++t)
    for (Index n = 0; n < eta.cols(); ++n) {
      y(t, n) = static_cast<double>(poisson_draw(softplus(eta(t, n)), rng));
      if (stats && y(t, n) > 1) ++stats->multi_spike_bins;
    }
  return y;
}

Matrix generate_spikes_lds_poisson(const Matrix& x, const Matrix& C, const Vector& d,
                                   std::uint64_t seed, SpikeStats* stats) {
  auto rng = make_rng(seed, 0, 2);
  return generate_spikes_lds_poisson(x, C, d, rng, stats);
}

SimDataset simulate(const SimSpec& spec) {
  spec.validate();
  const Index L = spec.latent_dim();
  const Index N = spec.N;

  SimDataset out;
  out.spec = spec;
  out.spec.L = L;

  auto prng = make_rng(spec.seed, 0, 0);
  Matrix alpha = spec.alpha;
  if (alpha.size() == 0) {
    alpha.resize(N, L);
    for (Index l = 0; l < L; ++l) {
      alpha.col(l) = standard_normal(N, prng);
      const double m = alpha.col(l).cwiseAbs().maxCoeff();
      if (m > 0) alpha.col(l) /= m;
    }
    alpha *= spec.loading_scale;
  }
  Vector bias = spec.bias;
  if (bias.size() == 0) bias = spec.bias_mean + spec.bias_sd * standard_normal(N, prng).array();
  out.truth.alpha = alpha;
  out.truth.beta = history_weights_from_filter(bias, spec.history_filter);

  out.data.bin_width = spec.bin_width;
  out.data.history_order = static_cast<Index>(spec.history_filter.size());
  out.data.trials.resize(static_cast<size_t>(spec.trials));
  out.latents.resize(static_cast<size_t>(spec.trials));
  for (Index k = 0; k < spec.trials; ++k) {
    auto lrng = make_rng(spec.seed, static_cast<std::uint64_t>(k) + 1, 1);
    auto srng = make_rng(spec.seed, static_cast<std::uint64_t>(k) + 1, 2);
    Matrix x;
    switch (spec.latent_kind) {
      case LatentKind::gp: x = sample_gp_latent(spec.T, L, spec.kernel, lrng); break;
      case LatentKind::lorenz: x = lorenz_trajectory(spec.T, spec.lorenz_dt, lrng); break;
      case LatentKind::lds: x = lds_trajectory(spec.lds, spec.T, lrng); break;
    }
    SpikeStats st;
    Matrix y = spec.latent_kind == LatentKind::lds
                   ? generate_spikes_lds_poisson(x, alpha, bias, srng, &st)
                   : generate_spikes_pp(x, out.truth, srng, spec.exponent_cap, &st);
    out.multi_spike_bins += st.multi_spike_bins;
    out.clamp_count += st.clamped;
    out.data.trials[static_cast<size_t>(k)] = std::move(y);
    out.latents[static_cast<size_t>(k)] = std::move(x);
  }
  if (out.clamp_count > 0)
    spdlog::warn("simulate: rate exponent capped in {} bins", out.clamp_count);
  return out;
}

}  // namespace vlgp
