#include "vlgp/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vlgp/evaluate.hpp"
#include "vlgp/inference.hpp"
#include "vlgp/init.hpp"
#include "vlgp/io.hpp"
#include "vlgp/simulate.hpp"

namespace vlgp {

namespace {

struct Loaded {
  json config;
  fs::path base;  // relative paths in the config resolve against this
};

Loaded load_config(const CommandOptions& opts, const std::set<std::string>& allowed) {
  Loaded l;
  l.config = read_json(opts.config);
  l.base = opts.config.parent_path();
  if (!l.config.is_object()) throw ValidationError("config: expected a JSON object");
  for (auto it = l.config.begin(); it != l.config.end(); ++it)
    if (!allowed.count(it.key())) throw ValidationError("config." + it.key() + ": unknown field");
#ifdef _OPENMP
  if (opts.threads > 0) omp_set_num_threads(opts.threads);
#endif
  require(opts.threads >= 0, "--threads must be >= 0");
  require(!opts.out.empty(), "--out must name a directory");
  return l;
}

fs::path path_field(const Loaded& l, const char* key) {
  if (!l.config.contains(key) || !l.config[key].is_string())
    throw ValidationError(std::string("config.") + key + ": expected a path string");
  const fs::path p = l.config[key].get<std::string>();
  return p.is_absolute() ? p : l.base / p;
}

json section(const Loaded& l, const char* key) {
  if (!l.config.contains(key)) return json::object();
  if (!l.config[key].is_object())
    throw ValidationError(std::string("config.") + key + ": expected an object");
  return l.config[key];
}

std::vector<Index> indices(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected an array of integers");
  std::vector<Index> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ValidationError(path + ": expected integers");
    out.push_back(v.get<Index>());
  }
  return out;
}

std::vector<Index> all_trials(Index n) {
  std::vector<Index> out(static_cast<size_t>(n));
  for (Index k = 0; k < n; ++k) out[static_cast<size_t>(k)] = k;
  return out;
}

void check_trials(const std::vector<Index>& trials, Index count, const std::string& path) {
  std::set<Index> seen;
  for (Index k : trials) {
    require(k >= 0 && k < count,
            path + ": trial " + std::to_string(k) + " is out of range [0, " +
                std::to_string(count) + ")");
    require(seen.insert(k).second, path + ": trial " + std::to_string(k) + " is repeated");
  }
}

json metrics_doc(const std::string& command, const json& config) {
  return json{{"format", "vlgp-metrics"},
              {"version", kMetricsVersion},
              {"command", command},
              {"software_version", version_string()},
              {"config", config}};
}

json unavailable(const std::string& why) { return json{{"unavailable", why}}; }

void check_compatible(const Dataset& ds, const FitArtifact& a) {
  require(ds.data.num_neurons() == a.params.num_neurons(),
          "dataset has " + std::to_string(ds.data.num_neurons()) + " neurons, artifact has " +
              std::to_string(a.params.num_neurons()));
  require(ds.data.history_order == a.history_order(),
          "dataset history order " + std::to_string(ds.data.history_order) +
              " differs from the artifact's " + std::to_string(a.history_order()));
  for (Index k : a.train_trials)
    require(k >= 0 && k < ds.data.num_trials(),
            "artifact trains on trial " + std::to_string(k) + " which the dataset lacks");
}

std::vector<Index> held_out(const FitArtifact& a, Index count) {
  std::set<Index> train(a.train_trials.begin(), a.train_trials.end());
  std::vector<Index> out;
  for (Index k = 0; k < count; ++k)
    if (!train.count(k)) out.push_back(k);
  return out;
}

void write_elbo_csv(const fs::path& path, const FitReport& r) {
  Matrix m(static_cast<Index>(r.elbo_trace.size()), 3);
  double clock = 0;
  for (Index i = 0; i < m.rows(); ++i) {
    if (i > 0 && static_cast<size_t>(i - 1) < r.wall_time.size())
      clock += r.wall_time[static_cast<size_t>(i - 1)];
    m(i, 0) = static_cast<double>(i);
    m(i, 1) = r.elbo_trace[static_cast<size_t>(i)];
    m(i, 2) = clock;
  }
  write_csv(path, m, std::vector<std::string>{"iteration", "elbo", "wall_time"});
}

bool write_rank_trace_csv(const fs::path& path, const json& diagnostics) {
  if (!diagnostics.contains("rank_corr_trace")) return false;
  const json& tr = diagnostics["rank_corr_trace"];
  Matrix m(static_cast<Index>(tr.size()), 3);
  for (Index i = 0; i < m.rows(); ++i) {
    const json& e = tr[static_cast<size_t>(i)];
    m(i, 0) = e.at("iteration").get<double>();
    m(i, 1) = e.at("wall_time").get<double>();
    m(i, 2) = e.at("rank_correlation").get<double>();
  }
  write_csv(path, m, std::vector<std::string>{"iteration", "wall_time", "rank_correlation"});
  return true;
}

}  // namespace

void cmd_simulate(const CommandOptions& opts) {
  const Loaded l = load_config(opts, {"simulate"});
  if (!l.config.contains("simulate"))
    throw ValidationError("config.simulate: missing field");
  SimSpec spec = sim_spec_from_json(l.config["simulate"], "config.simulate");
  if (opts.seed) spec.seed = *opts.seed;
  const SimDataset sim = simulate(spec);
  if (sim.multi_spike_bins > 0)
    spdlog::info("simulate: {} bins hold more than one spike", sim.multi_spike_bins);
  write_dataset(opts.out, to_dataset(sim));
}

void cmd_fit(const CommandOptions& opts) {
  const Loaded l = load_config(opts, {"dataset", "fit", "train_trials"});
  const Dataset ds = read_dataset(path_field(l, "dataset"));
  FitConfig cfg = fit_config_from_json(section(l, "fit"), "config.fit");
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.threads > 0) cfg.threads = opts.threads;
  std::vector<Index> train = l.config.contains("train_trials")
                                 ? indices(l.config["train_trials"], "config.train_trials")
                                 : all_trials(ds.data.num_trials());
  require(!train.empty(), "config.train_trials: no training trials");
  check_trials(train, ds.data.num_trials(), "config.train_trials");
  const Dataset tr = select_trials(ds, train);

  json diagnostics = json::object();
  IterationCallback callback;
  const auto start = std::chrono::steady_clock::now();
  json trace = json::array();
  if (tr.has_latents()) {
    const FAResult fa = factor_analysis(tr.data, cfg.L);
    diagnostics["fa_rank_correlation"] = rank_correlation(tr.latents, fa.latent_mean).mean_abs;
    callback = [&](Index iter, const VariationalState& state) {
      std::vector<Matrix> mu;
      for (const auto& q : state.posterior().trials) mu.push_back(q.mu);
      const double rho = rank_correlation(tr.latents, mu).mean_abs;
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      trace.push_back({{"iteration", iter}, {"wall_time", wall}, {"rank_correlation", rho}});
    };
  }
  const FitResult res = fit(tr.data, cfg, callback);
  if (tr.has_latents()) diagnostics["rank_corr_trace"] = trace;

  FitArtifact a;
  a.params = res.params;
  a.kernels = res.factors.kernels();
  a.factor = cfg.factor;
  a.posterior = res.posterior;
  a.report = res.report;
  a.config = fit_config_to_json(cfg);
  a.train_trials = train;
  a.bin_width = ds.data.bin_width;
  a.diagnostics = diagnostics;
  a.software_version = version_string();
  write_artifact(opts.out, a);
  write_elbo_csv(opts.out / "elbo_trace.csv", a.report);
  write_rank_trace_csv(opts.out / "rank_corr_walltime.csv", diagnostics);

  json doc = metrics_doc("fit", l.config);
  doc["config"]["fit"] = a.config;
  json m;
  m["elbo_final"] = a.report.elbo_trace.back();
  m["iterations"] = a.report.iterations;
  m["converged"] = a.report.converged;
  m["clamp_count"] = a.report.clamp_count;
  if (tr.has_latents()) {
    m["rank_correlation"] = trace.empty() ? json(nullptr) : trace.back()["rank_correlation"];
    m["fa_rank_correlation"] = diagnostics["fa_rank_correlation"];
  } else {
    m["rank_correlation"] = unavailable("dataset has no true latents");
  }
  doc["metrics"] = m;
  write_json(opts.out / "fit_summary.json", doc);
}

void cmd_infer(const CommandOptions& opts) {
  const Loaded l = load_config(opts, {"dataset", "artifact", "infer"});
  const Dataset ds = read_dataset(path_field(l, "dataset"));
  const FitArtifact a = read_artifact(path_field(l, "artifact"));
  check_compatible(ds, a);
  json sec = section(l, "infer");
  std::vector<Index> trials = all_trials(ds.data.num_trials());
  if (sec.contains("trials")) trials = indices(sec["trials"], "config.infer.trials");
  check_trials(trials, ds.data.num_trials(), "config.infer.trials");
  std::vector<bool> exclude;
  std::vector<Index> mask;
  if (sec.contains("mask")) {
    mask = indices(sec["mask"], "config.infer.mask");
    exclude.assign(static_cast<size_t>(ds.data.num_neurons()), false);
    for (Index n : mask) {
      require(n >= 0 && n < ds.data.num_neurons(),
              "config.infer.mask: neuron " + std::to_string(n) + " is out of range");
      exclude[static_cast<size_t>(n)] = true;
    }
    require(static_cast<Index>(std::count(exclude.begin(), exclude.end(), true)) <
                ds.data.num_neurons(),
            "config.infer.mask: every neuron is masked");
  }
  json settings = sec;
  settings.erase("trials");
  settings.erase("mask");
  const InferConfig icfg = infer_config_from_json(settings, "config.infer");
  const Dataset sel = select_trials(ds, trials);
  const LatentPosterior post =
      infer_posterior(sel.data, a.params, a.factors(sel.data.lengths()), icfg, exclude);
  json extra = {{"software_version", version_string()},
                {"config", l.config},
                {"mask", mask},
                {"infer", infer_config_to_json(icfg)}};
  write_posterior(opts.out, post, trials, extra);
}

void cmd_lono(const CommandOptions& opts) {
  const Loaded l = load_config(opts, {"dataset", "artifact", "lono"});
  const Dataset ds = read_dataset(path_field(l, "dataset"));
  const FitArtifact a = read_artifact(path_field(l, "artifact"));
  check_compatible(ds, a);
  json sec = section(l, "lono");
  std::vector<Index> test = held_out(a, ds.data.num_trials());
  if (sec.contains("test_trials")) {
    test = indices(sec["test_trials"], "config.lono.test_trials");
    const std::set<Index> train(a.train_trials.begin(), a.train_trials.end());
    for (Index k : test)
      require(!train.count(k), "config.lono.test_trials: trial " + std::to_string(k) +
                                   " was used for training; test trials must be held out");
    sec.erase("test_trials");
  }
  require(!test.empty(),
          "lono: no held-out trials (every trial was used for training; testing on "
          "training trials is not allowed)");
  check_trials(test, ds.data.num_trials(), "lono test trials");
  const InferConfig icfg = infer_config_from_json(sec, "config.lono");
  const Dataset sel = select_trials(ds, test);
  const PredictionSet pred = lono_predict(sel.data, a.params, a.factors(sel.data.lengths()), icfg);
  write_predictions(opts.out, pred, test);

  json doc = metrics_doc("lono", l.config);
  double spikes = 0;
  for (const auto& y : pred.counts) spikes += y.sum();
  json m;
  m["pll_bits_per_spike"] = pll(pred);
  m["r2"] = predictive_r2(pred.counts, pred.rate);
  m["spikes"] = spikes;
  m["test_trials"] = test;
  doc["metrics"] = m;
  write_json(opts.out / "metrics.json", doc);
}

void cmd_evaluate(const CommandOptions& opts) {
  const Loaded l = load_config(opts, {"dataset", "artifact", "evaluate"});
  const Dataset ds = read_dataset(path_field(l, "dataset"));
  const fs::path artifact_dir = path_field(l, "artifact");
  const FitArtifact a = read_artifact(artifact_dir);
  check_compatible(ds, a);
  const json sec = section(l, "evaluate");
  for (auto it = sec.begin(); it != sec.end(); ++it) {
    static const std::set<std::string> keys{"lono", "run_lono", "metrics", "n_sims",
                                            "bin_group", "seed", "trial_average", "infer"};
    if (!keys.count(it.key()))
      throw ValidationError("config.evaluate." + it.key() + ": unknown field");
  }
  const bool run_lono = sec.value("run_lono", true);
  const Index n_sims = sec.value("n_sims", Index{50});
  const Index bin_group = sec.value("bin_group", Index{50});
  std::uint64_t seed = sec.value("seed", std::uint64_t{0});
  if (opts.seed) seed = *opts.seed;
  const bool trial_average = sec.value("trial_average", false);
  require(n_sims >= 1, "config.evaluate.n_sims: must be >= 1");
  require(bin_group >= 1, "config.evaluate.bin_group: must be >= 1");

  static const std::vector<std::string> known{"pll",          "r2",
                                              "rank_correlation", "pseudo_r2",
                                              "subspace_angle", "noise_corr_power"};
  std::set<std::string> requested;
  if (sec.contains("metrics")) {
    if (!sec["metrics"].is_array()) throw ValidationError("config.evaluate.metrics: expected an array");
    for (const auto& v : sec["metrics"]) {
      if (!v.is_string() || std::find(known.begin(), known.end(), v.get<std::string>()) == known.end())
        throw ValidationError("config.evaluate.metrics: unknown metric " + v.dump());
      requested.insert(v.get<std::string>());
    }
  }
  const Dataset train = select_trials(ds, a.train_trials);
  std::map<std::string, json> metrics;

  // Prediction metrics from a LONO run.
  {
    std::optional<PredictionSet> pred;
    std::string why;
    if (sec.contains("lono")) {
      const fs::path p = sec["lono"].get<std::string>();
      pred = read_predictions(p.is_absolute() ? p : l.base / p);
    } else if (!run_lono) {
      why = "LONO predictions not requested";
    } else {
      const auto test = held_out(a, ds.data.num_trials());
      if (test.empty()) {
        why = "no held-out trials";
      } else {
        const InferConfig icfg =
            infer_config_from_json(sec.value("infer", json::object()), "config.evaluate.infer");
        const Dataset sel = select_trials(ds, test);
        pred = lono_predict(sel.data, a.params, a.factors(sel.data.lengths()), icfg);
      }
    }
    if (pred) {
      metrics["pll"] = pll(*pred);
      metrics["r2"] = predictive_r2(pred->counts, pred->rate);
    } else {
      metrics["pll"] = unavailable(why);
      metrics["r2"] = unavailable(why);
    }
  }

  std::vector<Matrix> mu;
  for (const auto& q : a.posterior.trials) mu.push_back(q.mu);
  if (train.has_latents()) {
    const RankCorrelation rc = rank_correlation(train.latents, mu);
    metrics["rank_correlation"] = rc.mean_abs;
    metrics["rank_correlation_per_dim"] = rc.rho;
  } else {
    metrics["rank_correlation"] = unavailable("dataset has no true latents");
  }
  if (ds.truth) {
    metrics["subspace_angle"] = subspace_angle(ds.truth->alpha, a.params.alpha);
  } else {
    metrics["subspace_angle"] = unavailable("dataset has no true loadings");
  }

  // Repeat-trial metrics need equally long trials within each condition.
  std::vector<int> conds = train.conditions;
  if (conds.empty()) conds.assign(train.data.trials.size(), 0);
  std::map<int, std::vector<Matrix>> groups;
  for (size_t k = 0; k < train.data.trials.size(); ++k)
    groups[conds[k]].push_back(train.data.trials[k]);
  bool repeatable = true;
  for (const auto& [c, g] : groups) {
    repeatable = repeatable && g.size() >= 2;
    for (const auto& y : g) repeatable = repeatable && y.rows() == g.front().rows();
  }
  if (repeatable) {
    const auto history = build_history(train.data);
    double ll_model = 0;
    for (size_t k = 0; k < train.data.trials.size(); ++k) {
      const auto& q = a.posterior.trials[k];
      ll_model += pp_loglik(train.data.trials[k],
                            expected_rates(q.mu, q.V, a.params, history[k]));
    }
    double ll_sat = 0;
    for (const auto& [c, g] : groups) ll_sat += loglik_saturated(g);
    metrics["pseudo_r2"] = pseudo_r2(ll_model, loglik_null(train.data.trials), ll_sat);
    const Matrix c_true = noise_correlation(train.data.trials, bin_group, train.conditions);
    if (c_true.norm() > 0) {
      const Matrix c_model = noise_corr_from_model(a.params, a.posterior, train.data, n_sims,
                                                   bin_group, seed, train.conditions);
      metrics["noise_corr_power"] = noise_corr_power(c_model, c_true);
      write_csv(opts.out / "noise_corr_true.csv", c_true, "n");
      write_csv(opts.out / "noise_corr_model.csv", c_model, "n");
    } else {
      metrics["noise_corr_power"] = unavailable("empirical noise correlation is zero");
    }
  } else {
    const std::string why = "needs at least two equally long training trials per condition";
    metrics["pseudo_r2"] = unavailable(why);
    metrics["noise_corr_power"] = unavailable(why);
  }

  for (const auto& name : requested)
    if (metrics[name].is_object())
      throw ValidationError("evaluate: requested metric " + name + " is unavailable: " +
                            metrics[name]["unavailable"].get<std::string>());

  fs::create_directories(opts.out);
  metrics["elbo_final"] = a.report.elbo_trace.back();
  json doc = metrics_doc("evaluate", l.config);
  doc["artifact_version"] = a.software_version;
  doc["metrics"] = json(metrics);

  // Plot data.
  json plots = json::array();
  write_elbo_csv(opts.out / "elbo_trace.csv", a.report);
  plots.push_back("elbo_trace.csv");
  if (write_rank_trace_csv(opts.out / "rank_corr_walltime.csv", a.diagnostics))
    plots.push_back("rank_corr_walltime.csv");
  const OrthogonalLatents ortho = orthogonalize_latents(mu, a.params.alpha, trial_average);
  const Index pcs = std::min<Index>(3, a.params.num_latents());
  for (size_t k = 0; k < ortho.mu.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "latent_trajectory_%03zu.csv", k);
    write_csv(opts.out / name, ortho.mu[k], "l");
    plots.push_back(name);
    std::snprintf(name, sizeof name, "pc3_projection_%03zu.csv", k);
    write_csv(opts.out / name, Matrix(ortho.mu[k].leftCols(pcs)), "pc");
    plots.push_back(name);
  }
  doc["singular_values"] = vector_to_json(ortho.singular_values);
  doc["plots"] = plots;
  write_json(opts.out / "metrics.json", doc);
}

void run_command(const std::string& name, const CommandOptions& opts) {
  if (name == "simulate") return cmd_simulate(opts);
  if (name == "fit") return cmd_fit(opts);
  if (name == "infer") return cmd_infer(opts);
  if (name == "lono") return cmd_lono(opts);
  if (name == "evaluate") return cmd_evaluate(opts);
  throw ValidationError("unknown command '" + name + "'");
}

}  // namespace vlgp
