#include "vlgp/vlgp.h"

#include <exception>
#include <memory>
#include <new>
#include <string>

#include "vlgp/commands.hpp"
#include "vlgp/evaluate.hpp"
#include "vlgp/inference.hpp"
#include "vlgp/io.hpp"
#include "vlgp/logging.hpp"

struct vlgp_dataset {
  vlgp::Dataset ds;
};

struct vlgp_model {
  vlgp::FitArtifact artifact;
};

namespace {

thread_local std::string last_error;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename F>
int guarded(F&& f) {
  last_error.clear();
  try {
    vlgp::init_logging();
    f();
    return VLGP_OK;
  } catch (const vlgp::ValidationError& e) {
    last_error = e.what();
    return VLGP_ERR_VALIDATION;
  } catch (const vlgp::NumericalError& e) {
    last_error = e.what();
    return VLGP_ERR_NUMERICAL;
  } catch (const nlohmann::json::exception& e) {
    last_error = std::string("invalid JSON: ") + e.what();
    return VLGP_ERR_VALIDATION;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return VLGP_ERR_VALIDATION;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return VLGP_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return VLGP_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown error";
    return VLGP_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw vlgp::ValidationError(std::string(what) + " is null");
}

void copy_out(const vlgp::Matrix& m, double* out) {
  Eigen::Map<RowMatrix>(out, m.rows(), m.cols()) = m;
}

const vlgp::Matrix& trial_of(const std::vector<vlgp::Matrix>& v, int64_t k) {
  if (k < 0 || k >= static_cast<int64_t>(v.size()))
    throw vlgp::ValidationError("trial index out of range");
  return v[static_cast<size_t>(k)];
}

vlgp::json parse_or_empty(const char* text, const char* what) {
  if (!text || !*text) return vlgp::json::object();
  try {
    return vlgp::json::parse(text);
  } catch (const vlgp::json::parse_error& e) {
    throw vlgp::ValidationError(std::string(what) + ": malformed JSON: " + e.what());
  }
}

}  // namespace

extern "C" {

const char* vlgp_version(void) { return vlgp::version_string(); }

const char* vlgp_last_error(void) { return last_error.c_str(); }

int vlgp_run_command(const char* command, const char* config_path, const char* out_dir,
                     int has_seed, uint64_t seed, int threads) {
  return guarded([&] {
    need(command, "command");
    need(config_path, "config path");
    need(out_dir, "output directory");
    vlgp::CommandOptions opts;
    opts.config = config_path;
    opts.out = out_dir;
    if (has_seed) opts.seed = seed;
    opts.threads = threads > 0 ? threads : 0;
    vlgp::run_command(command, opts);
  });
}

int vlgp_simulate(const char* spec_json, vlgp_dataset** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    const vlgp::SimSpec spec =
        vlgp::sim_spec_from_json(parse_or_empty(spec_json, "spec"), "spec");
    auto h = std::make_unique<vlgp_dataset>();
    h->ds = vlgp::to_dataset(vlgp::simulate(spec));
    *out = h.release();
  });
}

int vlgp_dataset_from_counts(int64_t num_trials, const int64_t* lengths, int64_t num_neurons,
                             const double* counts, int64_t history_order, double bin_width,
                             vlgp_dataset** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    need(lengths, "lengths");
    need(counts, "counts");
    if (num_trials < 1 || num_neurons < 1)
      throw vlgp::ValidationError("need at least one trial and one neuron");
    auto h = std::make_unique<vlgp_dataset>();
    h->ds.data.history_order = history_order;
    h->ds.data.bin_width = bin_width;
    const double* p = counts;
    for (int64_t k = 0; k < num_trials; ++k) {
      if (lengths[k] < 1) throw vlgp::ValidationError("trial lengths must be >= 1");
      h->ds.data.trials.push_back(
          Eigen::Map<const RowMatrix>(p, lengths[k], num_neurons));
      p += lengths[k] * num_neurons;
    }
    if (bin_width <= 0) throw vlgp::ValidationError("bin_width must be > 0");
    if (history_order < 0) throw vlgp::ValidationError("history_order must be >= 0");
    h->ds.data.validate();
    *out = h.release();
  });
}

int vlgp_dataset_load(const char* dir, vlgp_dataset** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<vlgp_dataset>();
    h->ds = vlgp::read_dataset(dir);
    *out = h.release();
  });
}

int vlgp_dataset_save(const vlgp_dataset* ds, const char* dir) {
  return guarded([&] {
    need(ds, "dataset");
    need(dir, "dir");
    vlgp::write_dataset(dir, ds->ds);
  });
}

void vlgp_dataset_free(vlgp_dataset* ds) { delete ds; }

int vlgp_dataset_info(const vlgp_dataset* ds, int64_t* num_trials, int64_t* num_neurons,
                      int64_t* history_order, int64_t* latent_dim) {
  return guarded([&] {
    need(ds, "dataset");
    if (num_trials) *num_trials = ds->ds.data.num_trials();
    if (num_neurons) *num_neurons = ds->ds.data.num_neurons();
    if (history_order) *history_order = ds->ds.data.history_order;
    if (latent_dim)
      *latent_dim = ds->ds.has_latents() ? ds->ds.latents.front().cols() : 0;
  });
}

int vlgp_dataset_trial_length(const vlgp_dataset* ds, int64_t trial, int64_t* T) {
  return guarded([&] {
    need(ds, "dataset");
    need(T, "T");
    *T = trial_of(ds->ds.data.trials, trial).rows();
  });
}

int vlgp_dataset_counts(const vlgp_dataset* ds, int64_t trial, double* out) {
  return guarded([&] {
    need(ds, "dataset");
    need(out, "out");
    copy_out(trial_of(ds->ds.data.trials, trial), out);
  });
}

int vlgp_dataset_latent(const vlgp_dataset* ds, int64_t trial, double* out) {
  return guarded([&] {
    need(ds, "dataset");
    need(out, "out");
    if (!ds->ds.has_latents()) throw vlgp::ValidationError("dataset has no true latents");
    copy_out(trial_of(ds->ds.latents, trial), out);
  });
}

int vlgp_fit(const vlgp_dataset* ds, const char* config_json, vlgp_model** out) {
  return guarded([&] {
    need(ds, "dataset");
    need(out, "out");
    *out = nullptr;
    const vlgp::FitConfig cfg =
        vlgp::fit_config_from_json(parse_or_empty(config_json, "config"), "config");
    const vlgp::FitResult res = vlgp::fit(ds->ds.data, cfg);
    auto h = std::make_unique<vlgp_model>();
    auto& a = h->artifact;
    a.params = res.params;
    a.kernels = res.factors.kernels();
    a.factor = cfg.factor;
    a.posterior = res.posterior;
    a.report = res.report;
    a.config = vlgp::fit_config_to_json(cfg);
    for (vlgp::Index k = 0; k < ds->ds.data.num_trials(); ++k) a.train_trials.push_back(k);
    a.bin_width = ds->ds.data.bin_width;
    a.software_version = vlgp::version_string();
    *out = h.release();
  });
}

int vlgp_model_load(const char* dir, vlgp_model** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<vlgp_model>();
    h->artifact = vlgp::read_artifact(dir);
    *out = h.release();
  });
}

int vlgp_model_save(const vlgp_model* m, const char* dir) {
  return guarded([&] {
    need(m, "model");
    need(dir, "dir");
    vlgp::write_artifact(dir, m->artifact);
  });
}

void vlgp_model_free(vlgp_model* m) { delete m; }

int vlgp_model_info(const vlgp_model* m, int64_t* num_neurons, int64_t* latent_dim,
                    int64_t* history_order, int64_t* iterations, double* final_elbo) {
  return guarded([&] {
    need(m, "model");
    const auto& a = m->artifact;
    if (num_neurons) *num_neurons = a.params.num_neurons();
    if (latent_dim) *latent_dim = a.params.num_latents();
    if (history_order) *history_order = a.params.history_order();
    if (iterations) *iterations = a.report.iterations;
    if (final_elbo) *final_elbo = a.report.elbo_trace.empty() ? 0.0 : a.report.elbo_trace.back();
  });
}

int vlgp_model_alpha(const vlgp_model* m, double* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    copy_out(m->artifact.params.alpha, out);
  });
}

int vlgp_model_beta(const vlgp_model* m, double* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    copy_out(m->artifact.params.beta, out);
  });
}

int vlgp_model_posterior_mean(const vlgp_model* m, int64_t trial, double* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    const auto& trials = m->artifact.posterior.trials;
    if (trial < 0 || trial >= static_cast<int64_t>(trials.size()))
      throw vlgp::ValidationError("trial index out of range");
    copy_out(trials[static_cast<size_t>(trial)].mu, out);
  });
}

int vlgp_infer(const vlgp_model* m, const vlgp_dataset* ds, const int64_t* mask,
               int64_t mask_len, double* mu_out) {
  return guarded([&] {
    need(m, "model");
    need(ds, "dataset");
    need(mu_out, "mu_out");
    const auto& a = m->artifact;
    const auto& data = ds->ds.data;
    std::vector<bool> exclude;
    if (mask && mask_len > 0) {
      exclude.assign(static_cast<size_t>(data.num_neurons()), false);
      for (int64_t i = 0; i < mask_len; ++i) {
        if (mask[i] < 0 || mask[i] >= data.num_neurons())
          throw vlgp::ValidationError("mask neuron out of range");
        exclude[static_cast<size_t>(mask[i])] = true;
      }
    }
    const vlgp::LatentPosterior post = vlgp::infer_posterior(
        data, a.params, a.factors(data.lengths()), vlgp::InferConfig{}, exclude);
    double* p = mu_out;
    for (const auto& q : post.trials) {
      copy_out(q.mu, p);
      p += q.mu.size();
    }
  });
}

int vlgp_lono_pll(const vlgp_model* m, const vlgp_dataset* ds, double* pll_out) {
  return guarded([&] {
    need(m, "model");
    need(ds, "dataset");
    need(pll_out, "pll_out");
    const auto& a = m->artifact;
    const auto& data = ds->ds.data;
    const vlgp::PredictionSet pred =
        vlgp::lono_predict(data, a.params, a.factors(data.lengths()));
    *pll_out = vlgp::pll(pred);
  });
}

int vlgp_rank_correlation(const double* true_x, const double* mu, int64_t T, int64_t true_dim,
                          int64_t latent_dim, double* out) {
  return guarded([&] {
    need(true_x, "true_x");
    need(mu, "mu");
    need(out, "out");
    if (T < 1 || true_dim < 1 || latent_dim < 1)
      throw vlgp::ValidationError("dimensions must be >= 1");
    const vlgp::Matrix x = Eigen::Map<const RowMatrix>(true_x, T, true_dim);
    const vlgp::Matrix m = Eigen::Map<const RowMatrix>(mu, T, latent_dim);
    *out = vlgp::rank_correlation(x, m).mean_abs;
  });
}

}  // extern "C"
