#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "vlgp/evaluate.hpp"
#include "vlgp/simulate.hpp"

using namespace vlgp;

TEST(Pll, BaselineIsZero) {
  Matrix y(4, 2);
  y << 1, 0, 0, 2, 1, 1, 0, 0;
  const double ybar = population_mean_rate({y});
  EXPECT_DOUBLE_EQ(ybar, 5.0 / 8.0);
  EXPECT_NEAR(pll({y}, {Matrix::Constant(4, 2, ybar)}, ybar), 0.0, 1e-15);
}

TEST(Pll, HandValue) {
  const double tiny = 1e-9;
  Matrix y(2, 1), lam(2, 1);
  y << 1, 0;
  lam << 1.0, tiny;
  EXPECT_NEAR(pll({y}, {lam}, 0.5), 1 - tiny / std::log(2.0), 1e-12);
}

TEST(Pll, ZeroSpikesRejected) {
  EXPECT_THROW(pll({Matrix::Zero(3, 2)}, {Matrix::Ones(3, 2)}, 0.1), ValidationError);
}

TEST(Pll, FinerBinsStayDefined) {
  Matrix y(4, 1), y2(8, 1);
  y << 1, 0, 2, 1;
  y2 << 1, 0, 0, 0, 1, 1, 0, 1;
  Matrix lam = Matrix::Constant(4, 1, 0.9), lam2 = Matrix::Constant(8, 1, 0.45);
  const double a = pll({y}, {lam}, population_mean_rate({y}));
  const double b = pll({y2}, {lam2}, population_mean_rate({y2}));
  EXPECT_TRUE(std::isfinite(a));
  EXPECT_TRUE(std::isfinite(b));
}

TEST(RectifiedRate, Values) {
  EXPECT_NEAR(rectified_rate_from_gaussian(1.0), 1.0, 1e-12);
  const double neg = rectified_rate_from_gaussian(-1.0);
  EXPECT_GT(neg, 0.0);
  EXPECT_NEAR(neg / (std::exp(-500.0) / 500.0), 1.0, 1e-9);
  EXPECT_NEAR(rectified_rate_from_gaussian(0.0), std::log(2.0) / 500, 1e-15);
  EXPECT_NEAR(rectified_rate_from_gaussian(0.0), 0.0013863, 1e-7);
}

TEST(PredictiveR2, Examples) {
  Matrix y(6, 1);
  y << 0, 1, 3, 1, 0, 2;
  EXPECT_DOUBLE_EQ(predictive_r2(y, y), 1.0);
  EXPECT_NEAR(predictive_r2(y, Matrix::Constant(6, 1, y.mean())), 0.0, 1e-15);
  // Residual r = y - mean; noise e orthogonal to r and to 1.
  const Vector r = y.col(0).array() - y.mean();
  Vector e(6);
  e << 1, -1, 0, 0, 1, -1;
  e -= r * (r.dot(e) / r.squaredNorm());
  e.array() -= e.mean();
  e -= r * (r.dot(e) / r.squaredNorm());
  const Matrix pred = (Vector::Constant(6, y.mean()) + e).eval();
  EXPECT_NEAR(predictive_r2(y, pred), -e.squaredNorm() / r.squaredNorm(), 1e-12);
  EXPECT_LT(predictive_r2(y, pred), 0.0);
}

TEST(Spearman, Properties) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  Vector a(1000), b(1000);
  for (Index i = 0; i < 1000; ++i) {
    a(i) = z(rng);
    b(i) = z(rng);
  }
  EXPECT_NEAR(spearman(a, a), 1.0, 1e-14);
  EXPECT_NEAR(spearman(a, a.array().cube().matrix()), 1.0, 1e-14);
  EXPECT_NEAR(spearman(a, -a), -1.0, 1e-14);
  EXPECT_LE(std::abs(spearman(a, b)), 0.05);
  EXPECT_TRUE(std::isnan(spearman(a, Vector::Ones(1000))));
}

TEST(Spearman, TiesUseAverageRanks) {
  Vector a(4), b(4);
  a << 1, 2, 2, 3;
  b << 1, 2, 3, 4;
  // Average ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
  const Vector ra = (Vector(4) << 1, 2.5, 2.5, 4).finished();
  const Vector rb = (Vector(4) << 1, 2, 3, 4).finished();
  const Vector ca = ra.array() - ra.mean(), cb = rb.array() - rb.mean();
  EXPECT_NEAR(spearman(a, b), ca.dot(cb) / (ca.norm() * cb.norm()), 1e-14);
}

TEST(RankCorrelation, AffineInvariantAndExclusions) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  Matrix x(400, 2);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  Matrix M(2, 2);
  M << 2, 1, -1, 3;
  const Matrix mu = (x * M).rowwise() + Eigen::RowVector2d(4, -1);
  EXPECT_NEAR(rank_correlation(x, x).mean_abs, 1.0, 1e-12);
  EXPECT_NEAR(rank_correlation(x, mu).mean_abs, 1.0, 1e-9);
  Matrix xc = x;
  xc.col(1).setConstant(2.0);
  const RankCorrelation rc = rank_correlation(xc, mu);
  EXPECT_TRUE(rc.excluded[1]);
  EXPECT_FALSE(rc.excluded[0]);
  EXPECT_NEAR(rc.mean_abs, 1.0, 1e-9);
}

TEST(PseudoR2, Examples) {
  EXPECT_DOUBLE_EQ(pseudo_r2(-10, -50, -10), 1.0);
  EXPECT_DOUBLE_EQ(pseudo_r2(-50, -50, -10), 0.0);
  EXPECT_DOUBLE_EQ(pseudo_r2(-30, -50, -10), 0.5);
}

TEST(PseudoR2, NullAndSaturatedLikelihoods) {
  Matrix a(3, 2), b(3, 2);
  a << 1, 0, 0, 2, 3, 1;
  b << 1, 2, 2, 0, 1, 1;
  const double ybar = (a.sum() + b.sum()) / 12.0;
  double null = 0;
  for (const Matrix* m : {&a, &b})
    for (Index i = 0; i < m->size(); ++i) null += m->data()[i] * std::log(ybar) - ybar;
  EXPECT_NEAR(loglik_null({a, b}), null, 1e-12);
  const Matrix mean = (a + b) / 2;
  double sat = 0;
  for (const Matrix* m : {&a, &b})
    for (Index i = 0; i < m->size(); ++i)
      if (m->data()[i] > 0) sat += m->data()[i] * std::log(mean.data()[i]) - mean.data()[i];
      else sat -= mean.data()[i];
  EXPECT_NEAR(loglik_saturated({a, b}), sat, 1e-12);
  EXPECT_GE(loglik_saturated({a, b}), loglik_null({a, b}));
}

TEST(Orthogonalize, AlreadyOrthogonalUnchangedUpToSign) {
  Matrix mu(100, 2);
  for (Index t = 0; t < 100; ++t) {
    mu(t, 0) = 3 * std::sin(0.1 * t);
    mu(t, 1) = std::cos(0.1 * t);
  }
  mu.col(1) -= mu.col(0) * (mu.col(0).dot(mu.col(1)) / mu.col(0).squaredNorm());
  const OrthogonalLatents o = orthogonalize_latents({mu});
  for (Index l = 0; l < 2; ++l)
    EXPECT_LE((o.mu[0].col(l).cwiseAbs() - mu.col(l).cwiseAbs()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GE(o.singular_values(0), o.singular_values(1));
}

TEST(Orthogonalize, RankOneAndLoadingsCompensate) {
  const Vector s = Vector::LinSpaced(50, -1, 1).array().sin();
  Matrix mu(50, 3);
  mu.col(0) = s;
  mu.col(1) = -2 * s;
  mu.col(2) = 0.5 * s;
  Matrix alpha(4, 3);
  alpha << 1, 0, 2, -1, 1, 0, 0.5, 0.5, 0.5, 3, -2, 1;
  const OrthogonalLatents o = orthogonalize_latents({mu}, alpha);
  EXPECT_LE(o.mu[0].rightCols(2).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE(o.singular_values.tail(2).maxCoeff(), 1e-12 * o.singular_values(0));
  EXPECT_LE((o.mu[0] * o.alpha.transpose() - mu * alpha.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((o.rotation.transpose() * o.rotation - Matrix::Identity(3, 3)).norm(), 1e-12);
}

TEST(NoiseCorrPower, Examples) {
  Matrix C(3, 3);
  C << 0, 0.2, -0.1, 0.2, 0, 0.3, -0.1, 0.3, 0;
  EXPECT_DOUBLE_EQ(noise_corr_power(C, C), 1.0);
  EXPECT_DOUBLE_EQ(noise_corr_power(Matrix::Zero(3, 3), C), 0.0);
  EXPECT_DOUBLE_EQ(noise_corr_power(-C, C), -1.0);
}

TEST(NoiseCorrelation, SharedFluctuationsAndZeroDiagonal) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::vector<Matrix> trials;
  for (int k = 0; k < 40; ++k) {
    Matrix y(100, 3);
    for (Index t = 0; t < 100; ++t) {
      const double shared = z(rng);
      y(t, 0) = std::poisson_distribution<int>(std::exp(1 + 0.5 * shared))(rng);
      y(t, 1) = std::poisson_distribution<int>(std::exp(1 + 0.5 * shared))(rng);
      y(t, 2) = std::poisson_distribution<int>(2.0)(rng);
    }
    trials.push_back(y);
  }
  const Matrix C = noise_correlation(trials, 5);
  EXPECT_EQ(C.diagonal(), Vector::Zero(3));
  EXPECT_GT(C(0, 1), 0.2);
  EXPECT_LT(std::abs(C(0, 2)), 0.1);
  EXPECT_EQ(C, C.transpose());
}

TEST(NoiseCorrelation, LatentFreeModelIsUncorrelated) {
  std::vector<Matrix> rates(5, Matrix::Constant(200, 4, 0.3));
  const Matrix C = noise_corr_from_rates(rates, 20, 10, 7);
  const double samples = 5 * 20 * 20;
  EXPECT_LE(C.cwiseAbs().maxCoeff(), 2.0 / std::sqrt(samples));
}

TEST(NoiseCorrelation, ConditionMeansRemoved) {
  // Two conditions with opposite mean profiles and no shared noise.
  std::mt19937_64 rng(4);
  std::vector<Matrix> trials;
  std::vector<int> cond;
  for (int k = 0; k < 40; ++k) {
    const int c = k % 2;
    Matrix y(60, 2);
    for (Index t = 0; t < 60; ++t) {
      const double m = (c == 0) == (t < 30) ? 4.0 : 0.5;
      y(t, 0) = std::poisson_distribution<int>(m)(rng);
      y(t, 1) = std::poisson_distribution<int>(m)(rng);
    }
    trials.push_back(y);
    cond.push_back(c);
  }
  EXPECT_LT(std::abs(noise_correlation(trials, 1, cond)(0, 1)), 0.06);
  EXPECT_GT(noise_correlation(trials, 1)(0, 1), 0.3);
}

TEST(SubspaceAngle, Examples) {
  Matrix A(4, 2);
  A << 1, 0, 0, 1, 0, 0, 0, 0;
  Matrix B(4, 2);
  B << 2, 1, 1, 1, 0, 0, 0, 0;
  EXPECT_NEAR(subspace_angle(A, B), 0.0, 1e-12);
  Matrix C(4, 2);
  C << 0, 0, 0, 0, 1, 0, 0, 1;
  EXPECT_NEAR(subspace_angle(A, C), M_PI / 2, 1e-12);
  Matrix D(4, 1);
  D << 1, 1, 0, 0;
  Matrix E(4, 1);
  E << 1, 0, 0, 0;
  EXPECT_NEAR(subspace_angle(D, E), M_PI / 4, 1e-12);
}

TEST(Lono, LatentFreeModelEqualsGlm) {
  auto inst = oracle::make_instance(6, 1, 120, 2, 8, 1.0, 0.01, 0.5, {-1.0, -0.5});
  SpikeData& data = inst.data;
  const ModelParams glm = fit_glm(data, 1);
  EXPECT_EQ(glm.alpha, Matrix::Zero(6, 1));
  PriorFactors f(inst.kernels, FactorOptions{}, data.lengths());
  const PredictionSet pred = lono_predict(data, glm, f);
  const auto history = build_history(data);
  for (size_t k = 0; k < data.trials.size(); ++k) {
    const Matrix ref = history_drive(glm, history[k]).array().exp();
    EXPECT_LE(((pred.rate[k] - ref).array() / ref.array()).abs().maxCoeff(), 1e-12);
  }
}

TEST(Lono, MatchedModelBeatsMeanRate) {
  SimSpec s = SimSpec::defaults(LatentKind::gp);
  s.N = 20;
  s.T = 200;
  s.trials = 1;
  s.seed = 4;
  const SimDataset sim = simulate(s);
  PriorFactors f({s.kernel, s.kernel}, FactorOptions{}, sim.data.lengths());
  const PredictionSet pred = lono_predict(sim.data, sim.truth, f);
  EXPECT_NO_THROW(pred.validate());
  EXPECT_GT(pll(pred), 0.0);
}

TEST(Lono, MaskedPosteriorTracksFullPosterior) {
  SimSpec s = SimSpec::defaults(LatentKind::gp);
  s.N = 30;
  s.T = 200;
  s.trials = 2;
  s.seed = 6;
  const SimDataset sim = simulate(s);
  PriorFactors f({s.kernel, s.kernel}, FactorOptions{}, sim.data.lengths());
  const LatentPosterior full = infer_posterior(sim.data, sim.truth, f, InferConfig{});
  std::vector<Matrix> full_mu, masked_mu;
  for (const auto& q : full.trials) full_mu.push_back(q.mu);
  const double rc_full = rank_correlation(sim.latents, full_mu).mean_abs;
  for (Index n : {0, 11, 29}) {
    std::vector<bool> mask(30, false);
    mask[static_cast<size_t>(n)] = true;
    const LatentPosterior m = infer_posterior(sim.data, sim.truth, f, InferConfig{}, mask);
    masked_mu.clear();
    for (const auto& q : m.trials) masked_mu.push_back(q.mu);
    EXPECT_GE(rank_correlation(sim.latents, masked_mu).mean_abs, rc_full - 0.05);
  }
}

TEST(FitGlm, ConstantRateMle) {
  SpikeData data;
  Matrix y(300, 2);
  std::mt19937_64 rng(1);
  std::poisson_distribution<int> p(0.4);
  for (Index i = 0; i < y.size(); ++i) y.data()[i] = p(rng);
  data.trials.push_back(y);
  const ModelParams g = fit_glm(data);
  EXPECT_NEAR(g.beta(0, 0), std::log(y.col(0).mean()), 1e-8);
  EXPECT_NEAR(g.beta(1, 0), std::log(y.col(1).mean()), 1e-8);
}
