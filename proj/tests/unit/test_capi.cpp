// Exercises libvlgp through its C header only.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "vlgp/vlgp.h"

namespace fs = std::filesystem;

namespace {

const char* kSpec = R"({"latent_kind": "gp", "N": 15, "T": 120, "trials": 3, "seed": 4})";
const char* kFit = R"({"L": 2, "max_iter": 4})";

struct Dataset {
  vlgp_dataset* p = nullptr;
  ~Dataset() { vlgp_dataset_free(p); }
};

struct Model {
  vlgp_model* p = nullptr;
  ~Model() { vlgp_model_free(p); }
};

fs::path temp_dir() {
  std::random_device rd;
  return fs::temp_directory_path() / ("vlgp_capi_" + std::to_string(rd()) + std::to_string(rd()));
}

}  // namespace

TEST(CApi, VersionString) {
  const std::string v = vlgp_version();
  EXPECT_EQ(v.rfind("0.1.0", 0), 0u) << v;
}

TEST(CApi, SimulateAndInspect) {
  Dataset ds;
  ASSERT_EQ(vlgp_simulate(kSpec, &ds.p), VLGP_OK) << vlgp_last_error();
  int64_t trials = 0, N = 0, p = -1, L = 0;
  ASSERT_EQ(vlgp_dataset_info(ds.p, &trials, &N, &p, &L), VLGP_OK);
  EXPECT_EQ(trials, 3);
  EXPECT_EQ(N, 15);
  EXPECT_EQ(p, 0);
  EXPECT_EQ(L, 2);
  int64_t T = 0;
  ASSERT_EQ(vlgp_dataset_trial_length(ds.p, 1, &T), VLGP_OK);
  EXPECT_EQ(T, 120);
  std::vector<double> counts(static_cast<size_t>(T * N)), latent(static_cast<size_t>(T * L));
  EXPECT_EQ(vlgp_dataset_counts(ds.p, 1, counts.data()), VLGP_OK);
  EXPECT_EQ(vlgp_dataset_latent(ds.p, 1, latent.data()), VLGP_OK);
  for (double c : counts) EXPECT_EQ(c, std::floor(c));
  EXPECT_EQ(vlgp_dataset_trial_length(ds.p, 3, &T), VLGP_ERR_VALIDATION);
  EXPECT_NE(std::string(vlgp_last_error()).find("out of range"), std::string::npos);
}

TEST(CApi, DatasetFromCountsHasNoLatents) {
  std::vector<double> counts = {0, 1, 2, 0, 1, 1, 0, 0, 3, 1};
  const int64_t lengths[2] = {3, 2};
  Dataset ds;
  ASSERT_EQ(vlgp_dataset_from_counts(2, lengths, 2, counts.data(), 1, 0.001, &ds.p), VLGP_OK)
      << vlgp_last_error();
  std::vector<double> row(4);
  EXPECT_EQ(vlgp_dataset_counts(ds.p, 1, row.data()), VLGP_OK);
  EXPECT_EQ(row, (std::vector<double>{0, 0, 3, 1}));
  EXPECT_EQ(vlgp_dataset_latent(ds.p, 0, row.data()), VLGP_ERR_VALIDATION);
  counts[0] = -1;
  Dataset bad;
  EXPECT_EQ(vlgp_dataset_from_counts(2, lengths, 2, counts.data(), 1, 0.001, &bad.p),
            VLGP_ERR_VALIDATION);
  EXPECT_EQ(bad.p, nullptr);
}

TEST(CApi, InvalidInputsReportValidation) {
  Dataset ds;
  EXPECT_EQ(vlgp_simulate("{not json", &ds.p), VLGP_ERR_VALIDATION);
  EXPECT_FALSE(std::string(vlgp_last_error()).empty());
  EXPECT_EQ(vlgp_simulate(R"({"N": 0})", &ds.p), VLGP_ERR_VALIDATION);
  EXPECT_EQ(vlgp_simulate(R"({"bogus": 1})", &ds.p), VLGP_ERR_VALIDATION);
  EXPECT_NE(std::string(vlgp_last_error()).find("bogus"), std::string::npos);
  EXPECT_EQ(vlgp_simulate(kSpec, nullptr), VLGP_ERR_VALIDATION);
  EXPECT_EQ(vlgp_dataset_info(nullptr, nullptr, nullptr, nullptr, nullptr), VLGP_ERR_VALIDATION);
  EXPECT_EQ(vlgp_run_command("dance", "x.json", "out", 0, 0, 0), VLGP_ERR_VALIDATION);
}

TEST(CApi, DivergentSimulationReportsNumerical) {
  Dataset ds;
  const char* spec = R"({"latent_kind": "lds", "N": 3, "T": 2000, "trials": 1,
                         "lds": {"A": [[2.0]], "Q": [[1.0]]}})";
  EXPECT_EQ(vlgp_simulate(spec, &ds.p), VLGP_ERR_NUMERICAL) << vlgp_last_error();
}

TEST(CApi, FitSaveLoadInfer) {
  Dataset ds;
  ASSERT_EQ(vlgp_simulate(kSpec, &ds.p), VLGP_OK);
  Model m;
  ASSERT_EQ(vlgp_fit(ds.p, kFit, &m.p), VLGP_OK) << vlgp_last_error();
  int64_t N = 0, L = 0, p = -1, iters = 0;
  double elbo = 0;
  ASSERT_EQ(vlgp_model_info(m.p, &N, &L, &p, &iters, &elbo), VLGP_OK);
  EXPECT_EQ(N, 15);
  EXPECT_EQ(L, 2);
  EXPECT_EQ(iters, 4);
  EXPECT_TRUE(std::isfinite(elbo));
  std::vector<double> alpha(static_cast<size_t>(N * L)), beta(static_cast<size_t>(N));
  ASSERT_EQ(vlgp_model_alpha(m.p, alpha.data()), VLGP_OK);
  ASSERT_EQ(vlgp_model_beta(m.p, beta.data()), VLGP_OK);

  const fs::path dir = temp_dir();
  ASSERT_EQ(vlgp_model_save(m.p, dir.string().c_str()), VLGP_OK) << vlgp_last_error();
  Model back;
  ASSERT_EQ(vlgp_model_load(dir.string().c_str(), &back.p), VLGP_OK) << vlgp_last_error();
  std::vector<double> alpha2(alpha.size());
  ASSERT_EQ(vlgp_model_alpha(back.p, alpha2.data()), VLGP_OK);
  EXPECT_EQ(alpha, alpha2);
  fs::remove_all(dir);

  std::vector<double> mu(3 * 120 * 2);
  const int64_t mask[1] = {3};
  ASSERT_EQ(vlgp_infer(back.p, ds.p, mask, 1, mu.data()), VLGP_OK) << vlgp_last_error();
  for (double v : mu) EXPECT_TRUE(std::isfinite(v));
  const int64_t bad_mask[1] = {15};
  EXPECT_EQ(vlgp_infer(back.p, ds.p, bad_mask, 1, mu.data()), VLGP_ERR_VALIDATION);

  std::vector<double> posterior(120 * 2);
  EXPECT_EQ(vlgp_model_posterior_mean(m.p, 0, posterior.data()), VLGP_OK);
  EXPECT_EQ(vlgp_model_posterior_mean(m.p, 3, posterior.data()), VLGP_ERR_VALIDATION);
}

TEST(CApi, FitRejectsBadConfig) {
  Dataset ds;
  ASSERT_EQ(vlgp_simulate(kSpec, &ds.p), VLGP_OK);
  Model m;
  EXPECT_EQ(vlgp_fit(ds.p, R"({"L": 2, "tol": -1})", &m.p), VLGP_ERR_VALIDATION);
  EXPECT_EQ(m.p, nullptr);
  EXPECT_EQ(vlgp_model_load("/nonexistent/vlgp", &m.p), VLGP_ERR_VALIDATION);
}

TEST(CApi, RankCorrelationIdentity) {
  std::vector<double> x(200);
  for (size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i));
  double rho = 0;
  ASSERT_EQ(vlgp_rank_correlation(x.data(), x.data(), 100, 2, 2, &rho), VLGP_OK);
  EXPECT_NEAR(rho, 1.0, 1e-12);
  EXPECT_EQ(vlgp_rank_correlation(x.data(), x.data(), 0, 2, 2, &rho), VLGP_ERR_VALIDATION);
}

TEST(CApi, LonoPll) {
  Dataset train, test;
  ASSERT_EQ(vlgp_simulate(kSpec, &train.p), VLGP_OK);
  ASSERT_EQ(vlgp_simulate(R"({"latent_kind": "gp", "N": 15, "T": 120, "trials": 1, "seed": 9})",
                          &test.p),
            VLGP_OK);
  Model m;
  ASSERT_EQ(vlgp_fit(train.p, R"({"L": 2, "max_iter": 10})", &m.p), VLGP_OK);
  double value = 0;
  ASSERT_EQ(vlgp_lono_pll(m.p, test.p, &value), VLGP_OK) << vlgp_last_error();
  EXPECT_TRUE(std::isfinite(value));
}
