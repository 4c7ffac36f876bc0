#ifndef VLGP_IO_HPP
#define VLGP_IO_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlgp/common.hpp"
#include "vlgp/evaluate.hpp"
#include "vlgp/inference.hpp"
#include "vlgp/model.hpp"
#include "vlgp/simulate.hpp"

namespace vlgp {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kDatasetVersion = 1;
inline constexpr int kArtifactVersion = 1;
inline constexpr int kPosteriorVersion = 1;
inline constexpr int kPredictionVersion = 1;
inline constexpr int kMetricsVersion = 1;

// ---- CSV -----------------------------------------------------------------

/// "%.17g" formatting, which round-trips every double.
std::string format_double(double v);

/// Headered CSV, rows = time bins. Header defaults to prefix0..prefix{n-1}.
void write_csv(const fs::path& path, const Matrix& m, const std::string& prefix = "c");
void write_csv(const fs::path& path, const Matrix& m, const std::vector<std::string>& header);
Matrix read_csv(const fs::path& path, std::vector<std::string>* header = nullptr);

// ---- JSON helpers ----------------------------------------------------------

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j, const std::string& path);
json vector_to_json(const Vector& v);
Vector vector_from_json(const json& j, const std::string& path);

/// Reads and parses a JSON file; ValidationError on malformed input.
json read_json(const fs::path& path);
/// Writes with two-space indentation and a trailing newline.
void write_json(const fs::path& path, const json& j);

/// Checks `format` and `version` fields of a versioned document.
void check_format(const json& j, const std::string& format, int version,
                  const std::string& where);

json kernel_to_json(const KernelSpec& k);
KernelSpec kernel_from_json(const json& j, const std::string& path, KernelSpec base = {});

json sim_spec_to_json(const SimSpec& s);
SimSpec sim_spec_from_json(const json& j, const std::string& path = "simulate");

json fit_config_to_json(const FitConfig& c);
FitConfig fit_config_from_json(const json& j, const std::string& path = "fit");

json infer_config_to_json(const InferConfig& c);
InferConfig infer_config_from_json(const json& j, const std::string& path);

json report_to_json(const FitReport& r);
FitReport report_from_json(const json& j, const std::string& path);

// ---- Datasets --------------------------------------------------------------

struct Dataset {
  SpikeData data;
  std::vector<Matrix> latents;       // empty when unknown
  std::optional<ModelParams> truth;  // generating parameters when known
  std::optional<Index> L_true;
  std::vector<int> conditions;       // one label per trial (may be empty)
  std::uint64_t seed = 0;
  json sim_spec;                     // generator echo (null when not simulated)
  json stats;                        // generator flags (null when not simulated)

  bool has_latents() const { return !latents.empty(); }
};

Dataset to_dataset(const SimDataset& sim);

/// manifest.json plus trial_XXX_counts.csv / trial_XXX_latent.csv and the
/// truth_alpha.csv / truth_beta.csv parameter files.
void write_dataset(const fs::path& dir, const Dataset& ds);
Dataset read_dataset(const fs::path& dir);

/// Subset of trials in the given order.
Dataset select_trials(const Dataset& ds, const std::vector<Index>& trials);

// ---- Fit artifacts -----------------------------------------------------------

struct FitArtifact {
  ModelParams params;
  std::vector<KernelSpec> kernels;
  FactorOptions factor;
  LatentPosterior posterior;  // of the training trials, in train_trials order
  FitReport report;
  json config;                // echo of the fit configuration
  std::vector<Index> train_trials;
  double bin_width = 0.001;
  json diagnostics = json::object();
  std::string software_version;

  Index history_order() const { return params.history_order(); }
  PriorFactors factors(const std::vector<Index>& lengths) const;
};

/// artifact.json plus alpha.csv, beta.csv and per-trial mu/W/V CSVs.
void write_artifact(const fs::path& dir, const FitArtifact& a);
FitArtifact read_artifact(const fs::path& dir);

// ---- Posteriors and predictions ----------------------------------------------

void write_posterior(const fs::path& dir, const LatentPosterior& post,
                     const std::vector<Index>& trials, const json& extra);
LatentPosterior read_posterior(const fs::path& dir, std::vector<Index>* trials = nullptr);

void write_predictions(const fs::path& dir, const PredictionSet& pred,
                       const std::vector<Index>& trials);
PredictionSet read_predictions(const fs::path& dir, std::vector<Index>* trials = nullptr);

}  // namespace vlgp

#endif  // VLGP_IO_HPP
