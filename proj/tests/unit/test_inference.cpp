#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "vlgp/evaluate.hpp"
#include "vlgp/inference.hpp"
#include "vlgp/simulate.hpp"

using namespace vlgp;

namespace {

PriorFactors full_rank(const oracle::Instance& inst) {
  return PriorFactors(inst.kernels, FactorOptions{1e-300, 1 << 20}, inst.data.lengths());
}

void fill_variance(oracle::Instance& inst, const PriorFactors& f) {
  for (auto& q : inst.posterior.trials)
    for (Index l = 0; l < q.mu.cols(); ++l)
      q.V.col(l) = posterior_variance(f.basis(l, q.mu.rows()), q.W.col(l));
}

double rel_err(const Vector& a, const Vector& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST(NewtonMu, MatchesDenseStep) {
  for (bool center : {false, true}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      auto inst = oracle::make_instance(8, 1, 60, 1, seed, 1.0, 0.04, 0.5, {}, 1e-3);
      const PriorFactors f = full_rank(inst);
      const PriorBasis& basis = f.basis(0, 60);
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> z;
      Vector g(60), w(60);
      for (Index t = 0; t < 60; ++t) {
        g(t) = z(rng);
        w(t) = std::abs(z(rng)) * 3;
      }
      const Vector mu = inst.posterior.trials[0].mu.col(0);
      const Vector lr = newton_mu_step(basis, mu, g, w, center);
      const Vector dense =
          oracle::dense_newton_mu(dense_kernel(60, inst.kernels[0]), mu, g, w, center);
      EXPECT_LE(rel_err(lr, dense), 1e-6) << "center " << center << " seed " << seed;
      if (center) {
        EXPECT_NEAR(lr.mean(), mu.mean(), 1e-9);
      }
    }
  }
}

TEST(NewtonMu, UnloadedLatentShrinksToZero) {
  auto inst = oracle::make_instance(5, 2, 50, 2, 4);
  inst.params.alpha.col(1).setZero();
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  for (auto& q : inst.posterior.trials)
    for (Index l = 0; l < 2; ++l) q.mu.col(l) = f.basis(l, 50).project(q.mu.col(l));
  fill_variance(inst, f);
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  s.newton_mu(1, false);
  for (const auto& q : s.posterior().trials)
    EXPECT_LE(q.mu.col(1).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(NewtonMu, NeverDecreasesElbo) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto inst = oracle::make_instance(12, 2, 80, 2, seed, 1.0, 0.01, 0.5);
    PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
    for (auto& q : inst.posterior.trials)
      for (Index l = 0; l < 2; ++l) q.mu.col(l) = f.basis(l, 80).center(f.basis(l, 80).project(q.mu.col(l)));
    fill_variance(inst, f);
    VariationalState s(inst.data, inst.params, inst.posterior, f);
    double prev = s.elbo();
    for (int it = 0; it < 3; ++it)
      for (Index l = 0; l < 2; ++l) {
        s.newton_mu(l);
        const double now = s.elbo();
        EXPECT_GE(now, prev - 1e-8);
        prev = now;
      }
  }
}

TEST(UpdateWV, ZeroLoadingsGivePriorVariance) {
  auto inst = oracle::make_instance(5, 1, 60, 1, 2, 1.5, 0.01);
  inst.params.alpha.setZero();
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  s.update_W_and_V();
  const auto& q = s.posterior().trials[0];
  EXPECT_EQ(q.W.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE((q.V.array() - 1.5).abs().maxCoeff(), 1e-6 * 1.5);
}

TEST(UpdateWV, SingleNeuronSingleBin) {
  SpikeData data;
  data.trials.push_back(Matrix::Constant(1, 1, 1));
  ModelParams params{Matrix::Constant(1, 1, 0.7), Matrix::Constant(1, 1, -0.3)};
  PriorFactors f({KernelSpec{}}, FactorOptions{}, data.lengths());
  LatentPosterior post = prior_posterior(data, f);
  post.trials[0].mu(0, 0) = 0.4;
  VariationalState s(data, params, post, f);
  const double lam = s.rates(0)(0, 0);
  s.update_W_and_V();
  EXPECT_NEAR(s.posterior().trials[0].W(0, 0), lam * 0.49, 1e-14);
}

TEST(UpdateWV, VarianceMatchesDenseOracle) {
  auto inst = oracle::make_instance(10, 2, 60, 2, 8, 1.0, 0.03, 0.4, {}, 1e-3);
  const PriorFactors f = full_rank(inst);
  fill_variance(inst, f);
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  s.update_W_and_V();
  for (const auto& q : s.posterior().trials)
    for (Index l = 0; l < 2; ++l) {
      EXPECT_TRUE((q.W.col(l).array() >= 0).all());
      const Vector ref =
          oracle::dense_posterior_variance(dense_kernel(60, inst.kernels[l]), q.W.col(l));
      EXPECT_LE(((q.V.col(l) - ref).array() / ref.array()).abs().maxCoeff(), 1e-6);
    }
}

TEST(NewtonAlpha, StationaryWhenRatesMatchCounts) {
  SpikeData data;
  data.trials.push_back(Matrix::Ones(30, 3));
  ModelParams params{Matrix::Zero(3, 1), Matrix::Zero(3, 1)};
  PriorFactors f({KernelSpec{}}, FactorOptions{}, data.lengths());
  LatentPosterior post = prior_posterior(data, f);
  post.trials[0].mu.col(0) = f.basis(0, 30).center(f.basis(0, 30).project(
      Vector::LinSpaced(30, -1, 1)));
  VariationalState s(data, params, post, f);
  EXPECT_LE(s.gradient_alpha(1).cwiseAbs().maxCoeff(), 1e-12);
  s.newton_alpha(1);
  EXPECT_EQ(s.params().alpha(1, 0), 0.0);
}

TEST(NewtonAlpha, ReducesToGlmNewtonStep) {
  auto inst = oracle::make_instance(6, 1, 200, 1, 21, 1.0, 0.01, 2.0);
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  auto& q = inst.posterior.trials[0];
  q.mu = inst.latents[0];
  q.V.setZero();
  // Start close to the generating loadings so the full step is accepted.
  inst.params.alpha *= 0.9;
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  const Index n = 2;
  const Vector x = q.mu.col(0);
  const Vector y = inst.data.trials[0].col(n);
  const double a = inst.params.alpha(n, 0);
  const Vector lam = (x * a + Vector::Constant(200, inst.params.beta(n, 0))).array().exp();
  const double step = x.dot(y - lam) / x.cwiseAbs2().dot(lam);
  s.newton_alpha(n);
  EXPECT_NEAR(s.params().alpha(n, 0), a + step, 1e-10 * std::abs(a + step));
}

TEST(NewtonBeta, ConstantRateFixedPoint) {
  auto inst = oracle::make_instance(4, 1, 300, 2, 9, 1.0, 0.01, 0.3);
  inst.params.alpha.setZero();
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  for (int it = 0; it < 20; ++it)
    for (Index n = 0; n < 4; ++n) s.newton_beta(n);
  for (Index n = 0; n < 4; ++n) {
    const double mean =
        (inst.data.trials[0].col(n).sum() + inst.data.trials[1].col(n).sum()) / 600.0;
    EXPECT_NEAR(s.params().beta(n, 0), std::log(mean), 1e-8);
  }
}

TEST(NewtonBeta, GradientZeroWhenRatesMatch) {
  SpikeData data;
  data.history_order = 2;
  data.trials.push_back(Matrix::Ones(20, 2));
  ModelParams params{Matrix::Zero(2, 1), Matrix::Zero(2, 3)};
  PriorFactors f({KernelSpec{}}, FactorOptions{}, data.lengths());
  VariationalState s(data, params, prior_posterior(data, f), f);
  EXPECT_LE(s.gradient_beta(0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NewtonBeta, SilentNeuronFallsBackToBias) {
  auto inst = oracle::make_instance(4, 1, 100, 1, 3, 1.0, 0.01, 0.5, {-1.0, -0.5});
  inst.data.trials[0].col(1).setZero();
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  fill_variance(inst, f);
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  const Vector before = s.params().beta.row(1);
  EXPECT_NO_THROW(s.newton_beta(1));
  const Vector after = s.params().beta.row(1);
  EXPECT_EQ(after.tail(2), before.tail(2));
  EXPECT_LT(after(0), before(0));
}

TEST(Gradients, MatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto inst = oracle::make_instance(7, 2, 30, 2, seed, 1.0, 0.05, 0.8, {-1.0, -0.3}, 1e-2);
    const PriorFactors f = full_rank(inst);
    fill_variance(inst, f);
    const auto history = build_history(inst.data);
    VariationalState s(inst.data, inst.params, inst.posterior, f);

    auto with_mu = [&](const Vector& v) {
      LatentPosterior p = inst.posterior;
      p.trials[1].mu.col(0) = v;
      return elbo(inst.data, history, inst.params, p, f);
    };
    EXPECT_LE(rel_err(s.gradient_mu(0, 1),
                      oracle::central_diff(with_mu, inst.posterior.trials[1].mu.col(0), 1e-5)),
              1e-5);

    auto with_alpha = [&](const Vector& v) {
      ModelParams p = inst.params;
      p.alpha.row(3) = v.transpose();
      return elbo(inst.data, history, p, inst.posterior, f);
    };
    EXPECT_LE(rel_err(s.gradient_alpha(3),
                      oracle::central_diff(with_alpha, inst.params.alpha.row(3).transpose(), 1e-5)),
              1e-5);

    auto with_beta = [&](const Vector& v) {
      ModelParams p = inst.params;
      p.beta.row(5) = v.transpose();
      return elbo(inst.data, history, p, inst.posterior, f);
    };
    EXPECT_LE(rel_err(s.gradient_beta(5),
                      oracle::central_diff(with_beta, inst.params.beta.row(5).transpose(), 1e-5)),
              1e-5);
  }
}

TEST(Constrain, HandExamples) {
  ModelParams params{Matrix(2, 1), Matrix::Zero(2, 1)};
  params.alpha << 1, -0.5;
  LatentPosterior post;
  TrialPosterior q{Matrix(3, 1), Matrix::Zero(3, 1), Matrix::Ones(3, 1)};
  q.mu << 1, 2, 3;
  post.trials.push_back(q);
  constrain(params, post);
  EXPECT_EQ(post.trials[0].mu, (Vector(3) << -1, 0, 1).finished());

  params.alpha << 2, -4;
  post.trials[0].mu.setZero();
  const ConstrainResult r = constrain(params, post);
  EXPECT_EQ(params.alpha, (Matrix(2, 1) << 0.5, -1).finished());
  EXPECT_DOUBLE_EQ(r.scales[0], 4.0);
  EXPECT_DOUBLE_EQ(post.trials[0].V(0, 0), 16.0);

  // Idempotent once centered and normalized.
  const ModelParams p0 = params;
  const LatentPosterior q0 = post;
  constrain(params, post);
  EXPECT_EQ(params.alpha, p0.alpha);
  EXPECT_EQ(post.trials[0].mu, q0.trials[0].mu);
}

TEST(Constrain, ZeroColumnFlagged) {
  ModelParams params{Matrix::Zero(3, 2), Matrix::Zero(3, 1)};
  params.alpha(0, 1) = 3;
  LatentPosterior post;
  post.trials.push_back({Matrix::Zero(4, 2), Matrix::Zero(4, 2), Matrix::Ones(4, 2)});
  const ConstrainResult r = constrain(params, post);
  EXPECT_TRUE(r.zero_column[0]);
  EXPECT_FALSE(r.zero_column[1]);
  EXPECT_EQ(params.alpha.col(0), Vector::Zero(3));
}

TEST(Constrain, StateKeepsElbo) {
  auto inst = oracle::make_instance(10, 2, 60, 2, 6, 1.0, 0.02, 0.5);
  inst.params.alpha *= 3.0;
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  for (auto& q : inst.posterior.trials)
    for (Index l = 0; l < 2; ++l)
      q.mu.col(l) = f.basis(l, 60).center(f.basis(l, 60).project(q.mu.col(l)));
  fill_variance(inst, f);
  VariationalState s(inst.data, inst.params, inst.posterior, f);
  const double before = s.elbo();
  s.constrain();
  EXPECT_NEAR(s.elbo(), before, 1e-9 * std::abs(before));
  for (Index l = 0; l < 2; ++l)
    EXPECT_NEAR(s.params().alpha.col(l).cwiseAbs().maxCoeff(), 1.0, 1e-15);
}

TEST(Hyper, PriorPosteriorIsStationary) {
  KernelSpec k;
  k.sigma2 = 1.3;
  k.omega = 0.02;
  const double jitter = 1e-6;
  Matrix K = dense_kernel(40, k);
  K.diagonal().array() += jitter;
  HyperWindow w{Vector::Zero(40), K, 0.0};
  w.logdet_sigma = 2.0 * Eigen::LLT<Matrix>(K).matrixLLT().diagonal().array().log().sum();
  const Eigen::Vector2d g = hyper_gradient({w}, k, jitter);
  EXPECT_LE(g.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Hyper, GradientMatchesFiniteDifferences) {
  auto inst = oracle::make_instance(10, 1, 120, 3, 4, 1.0, 0.01, 1.0);
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  VariationalState s(inst.data, inst.params, prior_posterior(inst.data, f), f);
  for (int i = 0; i < 3; ++i) {
    s.newton_mu(0);
    s.update_W_and_V();
  }
  std::mt19937_64 rng(3);
  KernelSpec spec = inst.kernels[0];
  spec.omega = 0.004;
  const double jitter = default_dense_jitter(spec);
  const auto windows = draw_hyper_windows(s.posterior(), 0, spec, jitter, 40, 4, rng);
  ASSERT_EQ(windows.size(), 4u);
  auto objective = [&](const Vector& x) {
    KernelSpec k = spec;
    k.sigma2 = std::exp(x(0));
    k.omega = std::exp(x(1));
    return hyper_objective(windows, k, jitter);
  };
  const Vector x0 = Eigen::Vector2d(std::log(spec.sigma2), std::log(spec.omega));
  const Vector fd = oracle::central_diff(objective, x0, 1e-5);
  const Vector g = hyper_gradient(windows, spec, jitter);
  EXPECT_LE(std::abs(g(0) - fd(0)), 1e-4 * std::abs(fd(0)));
  EXPECT_LE(std::abs(g(1) - fd(1)), 1e-4 * std::abs(fd(1)));
}

TEST(Hyper, OptimizeIncreasesObjective) {
  auto inst = oracle::make_instance(20, 1, 200, 2, 12, 1.0, 0.01, 1.0);
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  VariationalState s(inst.data, inst.params, prior_posterior(inst.data, f), f);
  for (int i = 0; i < 5; ++i) {
    s.newton_mu(0);
    s.update_W_and_V();
  }
  std::mt19937_64 rng(1);
  KernelSpec start = inst.kernels[0];
  start.omega = 1e-4;
  const double jitter = default_dense_jitter(start);
  const auto windows = draw_hyper_windows(s.posterior(), 0, start, jitter, 100, 10, rng);
  const KernelSpec out = optimize_hyper(windows, start, jitter, 10);
  EXPECT_GT(hyper_objective(windows, out, jitter), hyper_objective(windows, start, jitter));
  EXPECT_GT(out.omega, start.omega);
}

TEST(Fit, ElboTraceMonotoneAndDeterministic) {
  SimSpec spec = SimSpec::defaults(LatentKind::gp);
  spec.N = 20;
  spec.T = 150;
  spec.trials = 2;
  spec.seed = 5;
  const SimDataset sim = simulate(spec);
  FitConfig cfg;
  cfg.max_iter = 15;
  cfg.hyper_every = 3;
  const FitResult a = fit(sim.data, cfg);
  ASSERT_GE(a.report.elbo_trace.size(), 2u);
  for (size_t i = 1; i < a.report.elbo_trace.size(); ++i)
    EXPECT_GE(a.report.elbo_trace[i], a.report.elbo_trace[i - 1] - 1e-8) << "iteration " << i;
  for (Index l = 0; l < a.params.num_latents(); ++l)
    EXPECT_NEAR(a.params.alpha.col(l).cwiseAbs().maxCoeff(), 1.0, 1e-12);
  const FitResult b = fit(sim.data, cfg);
  EXPECT_EQ(a.params.alpha, b.params.alpha);
  EXPECT_EQ(a.report.elbo_trace, b.report.elbo_trace);
}

TEST(Fit, CallbackEveryIteration) {
  auto inst = oracle::make_instance(10, 1, 80, 1, 2);
  FitConfig cfg;
  cfg.L = 1;
  cfg.max_iter = 4;
  cfg.tol = 1e-300;
  Index calls = 0;
  fit(inst.data, cfg, [&](Index, const VariationalState&) { ++calls; });
  EXPECT_EQ(calls, 4);
}

TEST(Fit, RejectsBadConfig) {
  auto inst = oracle::make_instance(5, 1, 40, 1, 2);
  FitConfig cfg;
  cfg.L = 0;
  EXPECT_THROW(fit(inst.data, cfg), ValidationError);
  cfg.L = 5;
  EXPECT_THROW(fit(inst.data, cfg), ValidationError);
  cfg.L = 1;
  cfg.kernels = {KernelSpec{1.0, 0.0, 0.0}};
  EXPECT_THROW(fit(inst.data, cfg), ValidationError);
}

TEST(Infer, ConvergedGradientSmall) {
  auto inst = oracle::make_instance(20, 1, 150, 1, 17, 1.0, 0.01, 0.5, {}, 1e-3);
  PriorFactors f(inst.kernels, FactorOptions{1e-300, 1 << 20}, inst.data.lengths());
  InferConfig cfg;
  cfg.tol = 1e-10;
  cfg.max_iter = 200;
  cfg.center = false;
  const LatentPosterior post = infer_posterior(inst.data, inst.params, f, cfg);
  VariationalState s(inst.data, inst.params, post, f);
  EXPECT_LE(s.gradient_mu(0, 0).cwiseAbs().maxCoeff(), 1e-4 * 20);
}

TEST(Infer, MatchesFitFixedPoint) {
  SimSpec spec = SimSpec::defaults(LatentKind::gp);
  spec.N = 25;
  spec.T = 120;
  spec.trials = 2;
  spec.L = 1;
  spec.seed = 8;
  const SimDataset sim = simulate(spec);
  FitConfig cfg;
  cfg.L = 1;
  cfg.tol = 1e-7;
  cfg.max_iter = 300;
  cfg.learn_hyper = false;
  const FitResult r = fit(sim.data, cfg);
  InferConfig icfg;
  icfg.tol = 1e-9;
  icfg.max_iter = 500;
  const LatentPosterior post = infer_posterior(sim.data, r.params, r.factors, icfg);
  for (size_t k = 0; k < post.trials.size(); ++k) {
    const Matrix& a = r.posterior.trials[k].mu;
    EXPECT_LE((post.trials[k].mu - a).cwiseAbs().maxCoeff(), 1e-3 * a.cwiseAbs().maxCoeff());
  }
}

TEST(Infer, MaskedNeuronHasNoInfluence) {
  auto inst = oracle::make_instance(12, 2, 100, 2, 31, 1.0, 0.01, 0.6, {-2.0});
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  std::vector<bool> mask(12, false);
  mask[4] = true;
  const LatentPosterior a = infer_posterior(inst.data, inst.params, f, InferConfig{}, mask);
  SpikeData permuted = inst.data;
  std::mt19937_64 rng(2);
  for (auto& y : permuted.trials) {
    Vector col = y.col(4);
    std::shuffle(col.data(), col.data() + col.size(), rng);
    y.col(4) = col;
  }
  const LatentPosterior b = infer_posterior(permuted, inst.params, f, InferConfig{}, mask);
  for (size_t k = 0; k < a.trials.size(); ++k) {
    EXPECT_EQ(a.trials[k].mu, b.trials[k].mu);
    EXPECT_EQ(a.trials[k].V, b.trials[k].V);
  }
}

TEST(Infer, AllButOneNeuronFinitePositive) {
  auto inst = oracle::make_instance(6, 2, 80, 1, 13);
  PriorFactors f(inst.kernels, FactorOptions{}, inst.data.lengths());
  std::vector<bool> mask(6, true);
  mask[2] = false;
  const LatentPosterior p = infer_posterior(inst.data, inst.params, f, InferConfig{}, mask);
  EXPECT_TRUE(p.trials[0].mu.allFinite());
  EXPECT_TRUE((p.trials[0].V.array() > 0).all());
}
