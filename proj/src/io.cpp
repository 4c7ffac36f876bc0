#include "vlgp/io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace vlgp {

// ---- CSV -----------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(const fs::path& path, const Matrix& m, const std::vector<std::string>& header) {
  require(static_cast<Index>(header.size()) == m.cols(),
          "write_csv: header does not match the column count of " + path.string());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
  if (!out) throw ValidationError("error while writing " + path.string());
}

void write_csv(const fs::path& path, const Matrix& m, const std::string& prefix) {
  std::vector<std::string> header;
  for (Index j = 0; j < m.cols(); ++j) header.push_back(prefix + std::to_string(j));
  write_csv(path, m, header);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

Matrix read_csv(const fs::path& path, std::vector<std::string>* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto head = line.empty() ? std::vector<std::string>{} : split(line);
  const size_t cols = head.size();
  std::vector<double> values;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != cols)
      throw ValidationError(path.string() + ": row " + std::to_string(rows + 1) + " has " +
                            std::to_string(cells.size()) + " fields, expected " +
                            std::to_string(cols));
    for (const auto& c : cells) {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(c.c_str(), &end);
      if (c.empty() || end != c.c_str() + c.size())
        throw ValidationError(path.string() + ": not a number: '" + c + "'");
      values.push_back(v);
    }
    ++rows;
  }
  Matrix m(rows, static_cast<Index>(cols));
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = values[static_cast<size_t>(i * m.cols() + j)];
  if (header) *header = head;
  return m;
}

// ---- JSON helpers ----------------------------------------------------------

namespace {

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ValidationError(path + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ValidationError(path + "." + it.key() + ": unknown field");
}

double get_double(const json& j, const std::string& path, const char* key, double def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) throw ValidationError(path + "." + key + ": expected a number");
  return v.get<double>();
}

Index get_int(const json& j, const std::string& path, const char* key, Index def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ValidationError(path + "." + key + ": expected an integer");
  return v.get<Index>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key,
                      std::uint64_t def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_unsigned())
    throw ValidationError(path + "." + key + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const char* key, bool def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw ValidationError(path + "." + key + ": expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& path, const char* key,
                       const std::string& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) throw ValidationError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

const json& get_required(const json& j, const std::string& path, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw ValidationError(path + "." + key + ": missing field");
  return j.at(key);
}

std::string numbered(const std::string& stem, size_t k, const std::string& suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu", k);
  return stem + buf + suffix;
}

std::vector<Index> index_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected an array of integers");
  std::vector<Index> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ValidationError(path + ": expected integers");
    out.push_back(v.get<Index>());
  }
  return out;
}

}  // namespace

json matrix_to_json(const Matrix& m) {
  json out = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

Matrix matrix_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected an array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.front().size()) : 0;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const json& row = j.at(static_cast<size_t>(i));
    if (!row.is_array() || static_cast<Index>(row.size()) != cols)
      throw ValidationError(path + ": rows must be arrays of equal length");
    for (Index c = 0; c < cols; ++c) {
      const json& v = row.at(static_cast<size_t>(c));
      if (!v.is_number()) throw ValidationError(path + ": expected numbers");
      m(i, c) = v.get<double>();
    }
  }
  return m;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Vector vector_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected an array of numbers");
  Vector v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) {
    const json& x = j.at(static_cast<size_t>(i));
    if (!x.is_number()) throw ValidationError(path + ": expected numbers");
    v(i) = x.get<double>();
  }
  return v;
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw ValidationError("error while writing " + path.string());
}

void check_format(const json& j, const std::string& format, int version,
                  const std::string& where) {
  const std::string f = get_string(j, where, "format", "");
  if (f != format)
    throw ValidationError(where + ": expected format '" + format + "', got '" + f + "'");
  const Index v = get_int(j, where, "version", -1);
  if (v != version)
    throw ValidationError(where + ": unsupported " + format + " version " + std::to_string(v) +
                          " (this build reads version " + std::to_string(version) + ")");
}

json kernel_to_json(const KernelSpec& k) {
  return json{{"sigma2", k.sigma2}, {"omega", k.omega}, {"jitter", k.jitter}};
}

KernelSpec kernel_from_json(const json& j, const std::string& path, KernelSpec base) {
  check_keys(j, path, {"sigma2", "omega", "jitter"});
  base.sigma2 = get_double(j, path, "sigma2", base.sigma2);
  base.omega = get_double(j, path, "omega", base.omega);
  base.jitter = get_double(j, path, "jitter", base.jitter);
  try {
    base.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return base;
}

json sim_spec_to_json(const SimSpec& s) {
  json j;
  j["latent_kind"] = to_string(s.latent_kind);
  j["N"] = s.N;
  j["L"] = s.latent_dim();
  j["T"] = s.T;
  j["trials"] = s.trials;
  j["seed"] = s.seed;
  j["bin_width"] = s.bin_width;
  j["kernel"] = kernel_to_json(s.kernel);
  j["lorenz_dt"] = s.lorenz_dt;
  if (s.latent_kind == LatentKind::lds)
    j["lds"] = json{{"A", matrix_to_json(s.lds.A)},
                    {"b", vector_to_json(s.lds.b)},
                    {"Q", matrix_to_json(s.lds.Q)},
                    {"mu0", vector_to_json(s.lds.mu0)},
                    {"Q0", matrix_to_json(s.lds.Q0)}};
  j["history_filter"] = s.history_filter;
  j["loading_scale"] = s.loading_scale;
  j["bias_mean"] = s.bias_mean;
  j["bias_sd"] = s.bias_sd;
  if (s.alpha.size() > 0) j["alpha"] = matrix_to_json(s.alpha);
  if (s.bias.size() > 0) j["bias"] = vector_to_json(s.bias);
  j["exponent_cap"] = s.exponent_cap;
  return j;
}

SimSpec sim_spec_from_json(const json& j, const std::string& path) {
  check_keys(j, path,
             {"latent_kind", "N", "L", "T", "trials", "seed", "bin_width", "kernel",
              "lorenz_dt", "lds", "history_filter", "loading_scale", "bias_mean", "bias_sd",
              "alpha", "bias", "exponent_cap"});
  SimSpec s = SimSpec::defaults(parse_latent_kind(get_string(j, path, "latent_kind", "gp")));
  s.N = get_int(j, path, "N", s.N);
  s.L = get_int(j, path, "L", s.L);
  s.T = get_int(j, path, "T", s.T);
  s.trials = get_int(j, path, "trials", s.trials);
  s.seed = get_u64(j, path, "seed", s.seed);
  s.bin_width = get_double(j, path, "bin_width", s.bin_width);
  if (j.contains("kernel")) s.kernel = kernel_from_json(j["kernel"], path + ".kernel", s.kernel);
  s.lorenz_dt = get_double(j, path, "lorenz_dt", s.lorenz_dt);
  if (s.latent_kind == LatentKind::lds && j.contains("L") && !j.contains("lds"))
    s.lds = LdsSpec::rotating(s.L);
  if (j.contains("lds")) {
    const json& l = j["lds"];
    const std::string lp = path + ".lds";
    check_keys(l, lp, {"A", "b", "Q", "mu0", "Q0"});
    s.lds.A = matrix_from_json(get_required(l, lp, "A"), lp + ".A");
    const Index L = s.lds.A.rows();
    s.lds.b = l.contains("b") ? vector_from_json(l["b"], lp + ".b") : Vector::Zero(L);
    s.lds.Q = matrix_from_json(get_required(l, lp, "Q"), lp + ".Q");
    s.lds.mu0 = l.contains("mu0") ? vector_from_json(l["mu0"], lp + ".mu0") : Vector::Zero(L);
    s.lds.Q0 = l.contains("Q0") ? matrix_from_json(l["Q0"], lp + ".Q0") : Matrix(s.lds.Q);
  }
  if (j.contains("history_filter")) {
    const json& f = j["history_filter"];
    if (!f.is_array()) throw ValidationError(path + ".history_filter: expected an array");
    s.history_filter.clear();
    for (const auto& v : f) {
      if (!v.is_number()) throw ValidationError(path + ".history_filter: expected numbers");
      s.history_filter.push_back(v.get<double>());
    }
  }
  s.loading_scale = get_double(j, path, "loading_scale", s.loading_scale);
  s.bias_mean = get_double(j, path, "bias_mean", s.bias_mean);
  s.bias_sd = get_double(j, path, "bias_sd", s.bias_sd);
  if (j.contains("alpha")) s.alpha = matrix_from_json(j["alpha"], path + ".alpha");
  if (j.contains("bias")) s.bias = vector_from_json(j["bias"], path + ".bias");
  s.exponent_cap = get_double(j, path, "exponent_cap", s.exponent_cap);
  if (s.latent_kind == LatentKind::lds) s.L = s.latent_dim();
  try {
    s.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return s;
}

json fit_config_to_json(const FitConfig& c) {
  json kernels = json::array();
  for (const auto& k : c.kernels) kernels.push_back(kernel_to_json(k));
  return json{{"L", c.L},
              {"tol", c.tol},
              {"max_iter", c.max_iter},
              {"step_halving_max", c.step_halving_max},
              {"exponent_cap", c.exponent_cap},
              {"kernels", kernels},
              {"factor", {{"rel_tol", c.factor.rel_tol}, {"max_rank", c.factor.max_rank}}},
              {"learn_hyper", c.learn_hyper},
              {"hyper_every", c.hyper_every},
              {"subsample_len", c.subsample_len},
              {"n_subsamples", c.n_subsamples},
              {"hyper_steps", c.hyper_steps},
              {"seed", c.seed},
              {"threads", c.threads}};
}

FitConfig fit_config_from_json(const json& j, const std::string& path) {
  check_keys(j, path,
             {"L", "tol", "max_iter", "step_halving_max", "exponent_cap", "kernels", "kernel",
              "factor", "learn_hyper", "hyper_every", "subsample_len", "n_subsamples",
              "hyper_steps", "seed", "threads"});
  FitConfig c;
  c.L = get_int(j, path, "L", c.L);
  c.tol = get_double(j, path, "tol", c.tol);
  c.max_iter = get_int(j, path, "max_iter", c.max_iter);
  c.step_halving_max = get_int(j, path, "step_halving_max", c.step_halving_max);
  c.exponent_cap = get_double(j, path, "exponent_cap", c.exponent_cap);
  if (j.contains("kernels") && j.contains("kernel"))
    throw ValidationError(path + ": give either kernel or kernels, not both");
  if (j.contains("kernel")) c.kernels = {kernel_from_json(j["kernel"], path + ".kernel")};
  if (j.contains("kernels")) {
    const json& ks = j["kernels"];
    if (!ks.is_array() || ks.empty())
      throw ValidationError(path + ".kernels: expected a non-empty array");
    c.kernels.clear();
    for (size_t i = 0; i < ks.size(); ++i)
      c.kernels.push_back(kernel_from_json(ks[i], path + ".kernels[" + std::to_string(i) + "]"));
  }
  if (j.contains("factor")) {
    const json& f = j["factor"];
    check_keys(f, path + ".factor", {"rel_tol", "max_rank"});
    c.factor.rel_tol = get_double(f, path + ".factor", "rel_tol", c.factor.rel_tol);
    c.factor.max_rank = get_int(f, path + ".factor", "max_rank", c.factor.max_rank);
  }
  c.learn_hyper = get_bool(j, path, "learn_hyper", c.learn_hyper);
  c.hyper_every = get_int(j, path, "hyper_every", c.hyper_every);
  c.subsample_len = get_int(j, path, "subsample_len", c.subsample_len);
  c.n_subsamples = get_int(j, path, "n_subsamples", c.n_subsamples);
  c.hyper_steps = get_int(j, path, "hyper_steps", c.hyper_steps);
  c.seed = get_u64(j, path, "seed", c.seed);
  c.threads = static_cast<int>(get_int(j, path, "threads", c.threads));
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return c;
}

json infer_config_to_json(const InferConfig& c) {
  return json{{"tol", c.tol},
              {"max_iter", c.max_iter},
              {"step_halving_max", c.step_halving_max},
              {"exponent_cap", c.exponent_cap}};
}

InferConfig infer_config_from_json(const json& j, const std::string& path) {
  InferConfig c;
  c.tol = get_double(j, path, "tol", c.tol);
  c.max_iter = get_int(j, path, "max_iter", c.max_iter);
  c.step_halving_max = get_int(j, path, "step_halving_max", c.step_halving_max);
  c.exponent_cap = get_double(j, path, "exponent_cap", c.exponent_cap);
  require(c.tol > 0, path + ".tol: must be > 0");
  require(c.max_iter >= 1, path + ".max_iter: must be >= 1");
  require(c.step_halving_max >= 0, path + ".step_halving_max: must be >= 0");
  require(c.exponent_cap > 0, path + ".exponent_cap: must be > 0");
  return c;
}

json report_to_json(const FitReport& r) {
  json hyper = json::array();
  for (const auto& step : r.hyper_trace) {
    json ks = json::array();
    for (const auto& k : step) ks.push_back(kernel_to_json(k));
    hyper.push_back(ks);
  }
  return json{{"elbo_trace", r.elbo_trace},     {"converged", r.converged},
              {"iterations", r.iterations},     {"hyper_trace", hyper},
              {"clamp_count", r.clamp_count},   {"wall_time", r.wall_time},
              {"rejected_steps", r.rejected_steps}};
}

FitReport report_from_json(const json& j, const std::string& path) {
  FitReport r;
  try {
    r.elbo_trace = get_required(j, path, "elbo_trace").get<std::vector<double>>();
    r.converged = get_bool(j, path, "converged", false);
    r.iterations = get_int(j, path, "iterations", 0);
    for (const auto& step : get_required(j, path, "hyper_trace")) {
      std::vector<KernelSpec> ks;
      for (const auto& k : step) ks.push_back(kernel_from_json(k, path + ".hyper_trace"));
      r.hyper_trace.push_back(ks);
    }
    r.clamp_count = get_u64(j, path, "clamp_count", 0);
    r.wall_time = get_required(j, path, "wall_time").get<std::vector<double>>();
    r.rejected_steps = get_required(j, path, "rejected_steps").get<std::vector<Index>>();
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return r;
}

// ---- Datasets --------------------------------------------------------------

Dataset to_dataset(const SimDataset& sim) {
  Dataset ds;
  ds.data = sim.data;
  ds.latents = sim.latents;
  ds.truth = sim.truth;
  ds.L_true = sim.spec.latent_dim();
  ds.seed = sim.spec.seed;
  ds.sim_spec = sim_spec_to_json(sim.spec);
  ds.stats = {{"multi_spike_bins", sim.multi_spike_bins}, {"clamped_bins", sim.clamp_count}};
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  ds.data.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "vlgp-dataset";
  manifest["version"] = kDatasetVersion;
  manifest["N"] = ds.data.num_neurons();
  manifest["L_true"] = ds.L_true ? json(*ds.L_true) : json(nullptr);
  manifest["p"] = ds.data.history_order;
  manifest["bin_width"] = ds.data.bin_width;
  manifest["seed"] = ds.seed;
  manifest["sim_spec"] = ds.sim_spec;
  manifest["stats"] = ds.stats;
  json trials = json::array();
  for (size_t k = 0; k < ds.data.trials.size(); ++k) {
    json t;
    t["T"] = ds.data.trials[k].rows();
    t["counts"] = numbered("trial_", k, "_counts.csv");
    write_csv(dir / t["counts"].get<std::string>(), ds.data.trials[k], "n");
    if (ds.has_latents()) {
      t["latent"] = numbered("trial_", k, "_latent.csv");
      write_csv(dir / t["latent"].get<std::string>(), ds.latents[k], "x");
    }
    if (!ds.conditions.empty()) t["condition"] = ds.conditions[k];
    trials.push_back(t);
  }
  manifest["trials"] = trials;
  if (ds.truth) {
    manifest["truth"] = {{"alpha", "truth_alpha.csv"}, {"beta", "truth_beta.csv"}};
    write_csv(dir / "truth_alpha.csv", ds.truth->alpha, "l");
    write_csv(dir / "truth_beta.csv", ds.truth->beta, "b");
  } else {
    manifest["truth"] = nullptr;
  }
  write_json(dir / "manifest.json", manifest);
}

Dataset read_dataset(const fs::path& dir) {
  const std::string where = (dir / "manifest.json").string();
  const json m = read_json(dir / "manifest.json");
  check_format(m, "vlgp-dataset", kDatasetVersion, where);
  Dataset ds;
  const Index N = get_int(m, where, "N", -1);
  require(N >= 1, where + ": N must be >= 1");
  ds.data.history_order = get_int(m, where, "p", 0);
  require(ds.data.history_order >= 0, where + ": p must be >= 0");
  ds.data.bin_width = get_double(m, where, "bin_width", 0.001);
  ds.seed = get_u64(m, where, "seed", 0);
  if (m.contains("L_true") && !m["L_true"].is_null()) ds.L_true = get_int(m, where, "L_true", 0);
  if (m.contains("sim_spec")) ds.sim_spec = m["sim_spec"];
  if (m.contains("stats")) ds.stats = m["stats"];
  const json& trials = get_required(m, where, "trials");
  if (!trials.is_array() || trials.empty())
    throw ValidationError(where + ".trials: expected a non-empty array");
  bool any_latent = false, all_latent = true, any_cond = false;
  for (size_t k = 0; k < trials.size(); ++k) {
    const json& t = trials[k];
    const std::string tp = where + ".trials[" + std::to_string(k) + "]";
    const Index T = get_int(t, tp, "T", -1);
    Matrix y = read_csv(dir / get_string(t, tp, "counts", ""));
    if (y.rows() != T || y.cols() != N)
      throw ValidationError(tp + ": counts are " + std::to_string(y.rows()) + " x " +
                            std::to_string(y.cols()) + ", manifest says " + std::to_string(T) +
                            " x " + std::to_string(N));
    ds.data.trials.push_back(std::move(y));
    if (t.contains("latent")) {
      Matrix x = read_csv(dir / get_string(t, tp, "latent", ""));
      if (x.rows() != T) throw ValidationError(tp + ": latent length does not match T");
      if (ds.L_true && x.cols() != *ds.L_true)
        throw ValidationError(tp + ": latent width does not match L_true");
      ds.latents.push_back(std::move(x));
      any_latent = true;
    } else {
      all_latent = false;
    }
    if (t.contains("condition")) {
      any_cond = true;
      ds.conditions.push_back(static_cast<int>(get_int(t, tp, "condition", 0)));
    } else {
      ds.conditions.push_back(0);
    }
  }
  if (any_latent && !all_latent) throw ValidationError(where + ": latents given for only some trials");
  if (!any_cond) ds.conditions.clear();
  if (m.contains("truth") && !m["truth"].is_null()) {
    const json& tr = m["truth"];
    ModelParams p;
    p.alpha = read_csv(dir / get_string(tr, where + ".truth", "alpha", ""));
    p.beta = read_csv(dir / get_string(tr, where + ".truth", "beta", ""));
    if (p.alpha.rows() != N || p.beta.rows() != N)
      throw ValidationError(where + ".truth: parameter files must have N rows");
    ds.truth = p;
  }
  try {
    ds.data.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(where + ": " + e.what());
  }
  return ds;
}

Dataset select_trials(const Dataset& ds, const std::vector<Index>& trials) {
  Dataset out = ds;
  out.data.trials.clear();
  out.latents.clear();
  out.conditions.clear();
  for (Index k : trials) {
    require(k >= 0 && k < ds.data.num_trials(),
            "trial index " + std::to_string(k) + " is out of range");
    out.data.trials.push_back(ds.data.trials[static_cast<size_t>(k)]);
    if (ds.has_latents()) out.latents.push_back(ds.latents[static_cast<size_t>(k)]);
    if (!ds.conditions.empty()) out.conditions.push_back(ds.conditions[static_cast<size_t>(k)]);
  }
  return out;
}

// ---- Fit artifacts -----------------------------------------------------------

PriorFactors FitArtifact::factors(const std::vector<Index>& lengths) const {
  return PriorFactors(kernels, factor, lengths);
}

namespace {

void write_posterior_files(const fs::path& dir, const LatentPosterior& post, json& index) {
  json trials = json::array();
  for (size_t k = 0; k < post.trials.size(); ++k) {
    const auto& q = post.trials[k];
    json t = {{"T", q.mu.rows()},
              {"mu", numbered("mu_", k, ".csv")},
              {"W", numbered("W_", k, ".csv")},
              {"V", numbered("V_", k, ".csv")}};
    write_csv(dir / t["mu"].get<std::string>(), q.mu, "l");
    write_csv(dir / t["W"].get<std::string>(), q.W, "l");
    write_csv(dir / t["V"].get<std::string>(), q.V, "l");
    trials.push_back(t);
  }
  index["posterior"] = trials;
}

LatentPosterior read_posterior_files(const fs::path& dir, const json& index,
                                     const std::string& where, Index L) {
  LatentPosterior post;
  const json& trials = get_required(index, where, "posterior");
  if (!trials.is_array()) throw ValidationError(where + ".posterior: expected an array");
  for (size_t k = 0; k < trials.size(); ++k) {
    const std::string tp = where + ".posterior[" + std::to_string(k) + "]";
    const json& t = trials[k];
    const Index T = get_int(t, tp, "T", -1);
    TrialPosterior q;
    q.mu = read_csv(dir / get_string(t, tp, "mu", ""));
    q.W = read_csv(dir / get_string(t, tp, "W", ""));
    q.V = read_csv(dir / get_string(t, tp, "V", ""));
    for (const Matrix* m : {&q.mu, &q.W, &q.V})
      if (m->rows() != T || (L >= 0 && m->cols() != L))
        throw ValidationError(tp + ": posterior files do not match T x L");
    post.trials.push_back(std::move(q));
  }
  return post;
}

}  // namespace

void write_artifact(const fs::path& dir, const FitArtifact& a) {
  fs::create_directories(dir);
  json j;
  j["format"] = "vlgp-fit";
  j["version"] = kArtifactVersion;
  j["software_version"] = a.software_version;
  j["N"] = a.params.num_neurons();
  j["L"] = a.params.num_latents();
  j["p"] = a.params.history_order();
  j["bin_width"] = a.bin_width;
  json kernels = json::array();
  for (const auto& k : a.kernels) kernels.push_back(kernel_to_json(k));
  j["kernels"] = kernels;
  j["factor"] = {{"rel_tol", a.factor.rel_tol}, {"max_rank", a.factor.max_rank}};
  j["train_trials"] = a.train_trials;
  j["alpha"] = "alpha.csv";
  j["beta"] = "beta.csv";
  write_csv(dir / "alpha.csv", a.params.alpha, "l");
  write_csv(dir / "beta.csv", a.params.beta, "b");
  write_posterior_files(dir, a.posterior, j);
  j["report"] = report_to_json(a.report);
  j["config"] = a.config;
  j["diagnostics"] = a.diagnostics;
  write_json(dir / "artifact.json", j);
}

FitArtifact read_artifact(const fs::path& dir) {
  const std::string where = (dir / "artifact.json").string();
  const json j = read_json(dir / "artifact.json");
  check_format(j, "vlgp-fit", kArtifactVersion, where);
  FitArtifact a;
  a.software_version = get_string(j, where, "software_version", "");
  const Index N = get_int(j, where, "N", -1);
  const Index L = get_int(j, where, "L", -1);
  const Index p = get_int(j, where, "p", -1);
  require(N >= 1 && L >= 1 && p >= 0, where + ": N, L must be >= 1 and p >= 0");
  a.bin_width = get_double(j, where, "bin_width", 0.001);
  const json& ks = get_required(j, where, "kernels");
  if (!ks.is_array()) throw ValidationError(where + ".kernels: expected an array");
  for (size_t i = 0; i < ks.size(); ++i)
    a.kernels.push_back(kernel_from_json(ks[i], where + ".kernels[" + std::to_string(i) + "]"));
  require(static_cast<Index>(a.kernels.size()) == L, where + ": need one kernel per latent");
  const json& f = get_required(j, where, "factor");
  a.factor.rel_tol = get_double(f, where + ".factor", "rel_tol", a.factor.rel_tol);
  a.factor.max_rank = get_int(f, where + ".factor", "max_rank", a.factor.max_rank);
  a.train_trials = index_list(get_required(j, where, "train_trials"), where + ".train_trials");
  a.params.alpha = read_csv(dir / get_string(j, where, "alpha", "alpha.csv"));
  a.params.beta = read_csv(dir / get_string(j, where, "beta", "beta.csv"));
  if (a.params.alpha.rows() != N || a.params.alpha.cols() != L)
    throw ValidationError(where + ": alpha.csv is not N x L");
  if (a.params.beta.rows() != N || a.params.beta.cols() != 1 + p)
    throw ValidationError(where + ": beta.csv is not N x (1 + p)");
  a.posterior = read_posterior_files(dir, j, where, L);
  if (a.posterior.trials.size() != a.train_trials.size())
    throw ValidationError(where + ": one posterior per training trial expected");
  a.report = report_from_json(get_required(j, where, "report"), where + ".report");
  a.config = j.contains("config") ? j["config"] : json(nullptr);
  a.diagnostics = j.contains("diagnostics") ? j["diagnostics"] : json::object();
  return a;
}

// ---- Posteriors and predictions ----------------------------------------------

void write_posterior(const fs::path& dir, const LatentPosterior& post,
                     const std::vector<Index>& trials, const json& extra) {
  fs::create_directories(dir);
  json j = extra.is_object() ? extra : json::object();
  j["format"] = "vlgp-posterior";
  j["version"] = kPosteriorVersion;
  j["trials"] = trials;
  write_posterior_files(dir, post, j);
  write_json(dir / "posterior.json", j);
}

LatentPosterior read_posterior(const fs::path& dir, std::vector<Index>* trials) {
  const std::string where = (dir / "posterior.json").string();
  const json j = read_json(dir / "posterior.json");
  check_format(j, "vlgp-posterior", kPosteriorVersion, where);
  if (trials) *trials = index_list(get_required(j, where, "trials"), where + ".trials");
  return read_posterior_files(dir, j, where, -1);
}

void write_predictions(const fs::path& dir, const PredictionSet& pred,
                       const std::vector<Index>& trials) {
  pred.validate();
  fs::create_directories(dir);
  json j;
  j["format"] = "vlgp-predictions";
  j["version"] = kPredictionVersion;
  j["trials"] = trials;
  j["ybar"] = pred.ybar;
  json files = json::array();
  for (size_t k = 0; k < pred.rate.size(); ++k) {
    json t = {{"T", pred.rate[k].rows()},
              {"rate", numbered("rate_", k, ".csv")},
              {"eta", numbered("eta_", k, ".csv")},
              {"counts", numbered("counts_", k, ".csv")}};
    write_csv(dir / t["rate"].get<std::string>(), pred.rate[k], "n");
    write_csv(dir / t["eta"].get<std::string>(), pred.eta[k], "n");
    write_csv(dir / t["counts"].get<std::string>(), pred.counts[k], "n");
    files.push_back(t);
  }
  j["predictions"] = files;
  write_json(dir / "predictions.json", j);
}

PredictionSet read_predictions(const fs::path& dir, std::vector<Index>* trials) {
  const std::string where = (dir / "predictions.json").string();
  const json j = read_json(dir / "predictions.json");
  check_format(j, "vlgp-predictions", kPredictionVersion, where);
  PredictionSet pred;
  pred.ybar = get_double(j, where, "ybar", 0);
  if (trials) *trials = index_list(get_required(j, where, "trials"), where + ".trials");
  for (const auto& t : get_required(j, where, "predictions")) {
    pred.rate.push_back(read_csv(dir / get_string(t, where, "rate", "")));
    pred.eta.push_back(read_csv(dir / get_string(t, where, "eta", "")));
    pred.counts.push_back(read_csv(dir / get_string(t, where, "counts", "")));
  }
  pred.validate();
  return pred;
}

}  // namespace vlgp
