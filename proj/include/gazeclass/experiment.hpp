#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gazeclass/cohort.hpp"
#include "gazeclass/eval.hpp"
#include "gazeclass/hfm.hpp"
#include "gazeclass/two_stream.hpp"

namespace gazeclass {

struct CvConfig {
  std::string mode = "loocv";  // "loocv" | "kfold"
  std::size_t k = 13;
  std::uint64_t seed = 1;
};

struct BackboneSetup {
  BackboneConfig config;
  std::uint64_t seed = 7;
  std::string weights;  // GZC1 file, required for vgg16_headless
};

struct ExperimentConfig {
  std::string dataset;  // empty: generate from `synth`
  SynthParams synth;
  HfmParams hfm;
  BackboneSetup backbone;
  AsdNetConfig head;  // n_images and dim are filled from the data
  TrainHyper train;
  CvConfig cv;
  std::uint64_t seed = 1;
  std::string output_dir = "runs";

  // Throws ConfigError on any inconsistency.
  void validate() const;
};

// Desk-scale defaults for the synthetic benchmark.
ExperimentConfig default_config();

nlohmann::ordered_json config_to_json(const ExperimentConfig& config);
// Starts from default_config(); unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Applies "dotted.key=value" overrides; value is parsed as JSON, falling back
// to a plain string.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);

// Loads `dataset` when set; otherwise synthesizes from `synth`.
RawCohort load_raw_cohort(const ExperimentConfig& config);

Network<float> build_backbone(const BackboneSetup& setup);

// ---------------------------------------------------------------------------
// Commands. Failures throw; progress goes to `log`.

struct SynthOptions {
  std::filesystem::path out;
  bool force = false;
};
void cmd_synth(const ExperimentConfig& config, const SynthOptions& options, std::ostream& log);

struct HfmOptions {
  std::filesystem::path dataset;
  std::filesystem::path out;
  double sigma_px = 24.0;
  bool force = false;
};
void cmd_hfm(const HfmOptions& options, std::ostream& log);

struct RunOptions {
  std::string run_name;  // default: run-<UTC timestamp>
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> cache_dir;  // default: $GAZECLASS_CACHE_DIR
};

struct RunSummary {
  std::filesystem::path run_dir;
  MetricsReport metrics;
  std::vector<SubjectPrediction> predictions;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
  std::size_t features_computed = 0;
};

RunSummary cmd_run(const ExperimentConfig& config, const RunOptions& options, std::ostream& log);

enum class Analysis { lrp, contrib, tsne };
Analysis parse_analysis(const std::string& s);

struct AnalyzeOptions {
  std::filesystem::path run_dir;
  Analysis which = Analysis::tsne;
  std::size_t jobs = 1;
  bool force = false;
  // tsne and contrib: fold whose model is used
  std::size_t fold = 0;
  std::size_t tsne_iterations = 1000;
  std::optional<double> perplexity;
  // contrib
  bool held_out = false;  // score each subject with the fold model that held it out
  double discard_delta = 0.005;
  std::size_t discard_min_size = 1;
  // lrp
  std::string subject;  // default: first subject
  std::size_t variant = 0;
  std::optional<std::size_t> target;  // default: the subject's label
  double lrp_epsilon = 1e-6;
  double mask_threshold = 0.0029;
  double mask_mass = 0.75;
  std::string mask_mode = "threshold";  // or "mass"; used for feature scores
  std::filesystem::path annotations;
};

// Returns the analysis output directory.
std::filesystem::path cmd_analyze(const AnalyzeOptions& options, std::ostream& log);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<VerifyCheck> cmd_verify(std::uint64_t seed, std::ostream& log);

// Loaded run directory.
struct RunArtifacts {
  ExperimentConfig config;
  CvPlan plan;
  Network<float> backbone;
  std::vector<SubjectFeatures> subjects;
  std::vector<std::string> image_ids;
  std::vector<AsdNet> models;            // one per fold
  std::map<std::string, std::size_t> fold_of;  // subject -> fold holding it out
};

RunArtifacts load_run(const std::filesystem::path& run_dir);

// Feature matrices for every subject, by variant, written as GZC1.
void save_features(const std::filesystem::path& path, std::span<const SubjectFeatures> subjects);
std::vector<SubjectFeatures> load_features(const std::filesystem::path& path,
                                           std::span<const SubjectInfo> subjects);

}  // namespace gazeclass
