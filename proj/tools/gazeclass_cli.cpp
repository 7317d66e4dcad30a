// gazeclass: synth | hfm | run | analyze | verify | config

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gazeclass/experiment.hpp"

namespace {

using namespace gazeclass;
namespace fs = std::filesystem;

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  // Dedicated flags; applied after --set so they win.
  std::optional<std::string> dataset, output, cv;
  std::optional<std::size_t> k, max_iter, batch;
  std::optional<double> base_lr;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App& app, bool run_flags) {
    app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app.add_option("--set", sets, "Override a config key, e.g. --set train.max_iter=200");
    if (!run_flags) return;
    app.add_option("--dataset", dataset, "Dataset directory (default: synthesize from config)");
    app.add_option("--output", output, "Parent directory for run directories");
    app.add_option("--cv", cv, "Cross-validation mode")->check(CLI::IsMember({"loocv", "kfold"}));
    app.add_option("--k", k, "Number of folds for kfold");
    app.add_option("--max-iter", max_iter, "Training iterations per fold");
    app.add_option("--batch", batch, "Mini-batch size");
    app.add_option("--base-lr", base_lr, "Base learning rate");
    app.add_option("--seed", seed, "Training seed");
  }

  ExperimentConfig resolve() const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(config_path + ": " + e.what());
      }
    }
    std::vector<std::string> all = sets;
    auto add = [&](const char* key, const auto& v) {
      if (v) all.push_back(std::string(key) + "=" + nlohmann::json(*v).dump());
    };
    add("dataset", dataset);
    add("output_dir", output);
    add("cv.mode", cv);
    add("cv.k", k);
    add("train.max_iter", max_iter);
    add("train.batch", batch);
    add("train.base_lr", base_lr);
    add("seed", seed);
    return config_from_json(apply_overrides(std::move(j), all));
  }
};

int report_error(const char* kind, const std::exception& e) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = e.what();
  std::cerr << j.dump() << "\n";
  return std::string(kind) == "config" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream gaze classification at desk scale"};
  app.require_subcommand(1);

  ConfigFlags synth_flags, run_flags, config_flags;
  SynthOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset (images, gaze CSV, manifest)");
  synth_flags.add_to(*synth, false);
  synth->add_option("--out", synth_opts.out, "Output dataset directory")->required();
  synth->add_flag("--force", synth_opts.force, "Replace a non-empty output directory");

  HfmOptions hfm_opts;
  auto* hfm = app.add_subcommand("hfm", "Build fixation maps for a dataset");
  hfm->add_option("--dataset", hfm_opts.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  hfm->add_option("--out", hfm_opts.out, "Output directory")->required();
  hfm->add_option("--sigma", hfm_opts.sigma_px, "Gaussian sigma in pixels");
  hfm->add_flag("--force", hfm_opts.force, "Replace a non-empty output directory");

  RunOptions run_opts;
  std::string cache_dir;
  auto* run = app.add_subcommand("run", "Features, cross-validated training and evaluation");
  run_flags.add_to(*run, true);
  run->add_option("--run-name", run_opts.run_name, "Run directory name (default: run-<UTC timestamp>)");
  run->add_option("--jobs", run_opts.jobs, "Worker threads")->check(CLI::PositiveNumber);
  run->add_option("--cache-dir", cache_dir, "Feature cache directory (default: $GAZECLASS_CACHE_DIR)");

  AnalyzeOptions an_opts;
  std::string which = "tsne";
  std::optional<std::size_t> target;
  std::optional<double> perplexity;
  auto* analyze = app.add_subcommand("analyze", "LRP, contribution or t-SNE analysis of a run");
  analyze->add_option("run_dir", an_opts.run_dir, "Completed run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--which", which, "Analysis kind")->check(CLI::IsMember({"lrp", "contrib", "tsne"}));
  analyze->add_option("--jobs", an_opts.jobs, "Worker threads")->check(CLI::PositiveNumber);
  analyze->add_flag("--force", an_opts.force, "Replace an earlier analysis of the same kind");
  analyze->add_option("--fold", an_opts.fold, "tsne/contrib: fold whose model is used");
  analyze->add_flag("--held-out", an_opts.held_out, "contrib: score each subject with its held-out fold model");
  analyze->add_option("--iterations", an_opts.tsne_iterations, "t-SNE iterations");
  analyze->add_option("--perplexity", perplexity, "t-SNE perplexity");
  analyze->add_option("--delta", an_opts.discard_delta, "Greedy discard AUC tolerance");
  analyze->add_option("--min-size", an_opts.discard_min_size, "Greedy discard minimum keep size");
  analyze->add_option("--subject", an_opts.subject, "LRP subject (default: first)");
  analyze->add_option("--variant", an_opts.variant, "LRP augmentation variant");
  analyze->add_option("--target", target, "LRP target class (0 = TD, 1 = ASD; default: label)");
  analyze->add_option("--epsilon", an_opts.lrp_epsilon, "LRP epsilon");
  analyze->add_option("--threshold", an_opts.mask_threshold, "Absolute relevance threshold");
  analyze->add_option("--mass", an_opts.mask_mass, "Mass fraction for the quantile mask");
  analyze->add_option("--mask-mode", an_opts.mask_mode, "Mask for feature scores")->check(CLI::IsMember({"threshold", "mass"}));
  analyze->add_option("--annotations", an_opts.annotations, "Region annotation JSON")->check(CLI::ExistingFile);

  std::uint64_t verify_seed = 1;
  auto* verify = app.add_subcommand("verify", "Run the gradient, LRP, AUC and t-SNE oracle checks");
  verify->add_option("--seed", verify_seed, "Fixture seed");

  auto* config = app.add_subcommand("config", "Print the resolved experiment config as JSON");
  config_flags.add_to(*config, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      cmd_synth(synth_flags.resolve(), synth_opts, std::cout);
    } else if (hfm->parsed()) {
      cmd_hfm(hfm_opts, std::cout);
    } else if (run->parsed()) {
      if (!cache_dir.empty()) run_opts.cache_dir = fs::path(cache_dir);
      const auto summary = cmd_run(run_flags.resolve(), run_opts, std::cout);
      std::cout << "run directory: " << summary.run_dir.string() << "\n";
    } else if (analyze->parsed()) {
      an_opts.which = parse_analysis(which);
      an_opts.target = target;
      an_opts.perplexity = perplexity;
      const auto out = cmd_analyze(an_opts, std::cout);
      std::cout << "wrote " << out.string() << "\n";
    } else if (verify->parsed()) {
      const auto checks = cmd_verify(verify_seed, std::cout);
      for (const auto& c : checks) {
        if (!c.passed) return 1;
      }
    } else if (config->parsed()) {
      std::cout << config_to_json(config_flags.resolve()).dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    return report_error("config", e);
  } catch (const FormatError& e) {
    return report_error("format", e);
  } catch (const NumericError& e) {
    return report_error("numeric", e);
  } catch (const std::exception& e) {
    return report_error("runtime", e);
  }
  return 0;
}
