#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gazeclass/eval.hpp"
#include "gazeclass/two_stream.hpp"

namespace gazeclass {

// Sorted, duplicate-free image indices in [0, N).
class KeepSet {
 public:
  KeepSet() = default;
  KeepSet(std::vector<std::size_t> indices, std::size_t n_images);
  static KeepSet all(std::size_t n_images);
  static KeepSet none(std::size_t n_images) { return KeepSet({}, n_images); }

  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t size() const noexcept { return indices_.size(); }
  std::size_t n_images() const noexcept { return n_images_; }
  bool contains(std::size_t i) const;
  KeepSet without(std::size_t i) const;
  std::vector<bool> mask() const;

 private:
  std::vector<std::size_t> indices_;
  std::size_t n_images_ = 0;
};

// Which model scores which subject: a single model for everyone, or the
// model of the fold that held each subject out.
class ModelBank {
 public:
  explicit ModelBank(const AsdNet& shared) : shared_(&shared) {}
  ModelBank(std::map<std::string, const AsdNet*> per_subject) : per_subject_(std::move(per_subject)) {}

  const AsdNet& model_for(const std::string& subject_id) const;
  std::size_t n_images() const;

 private:
  const AsdNet* shared_ = nullptr;
  std::map<std::string, const AsdNet*> per_subject_;
};

// Per-subject mean p(ASD) over the ten variants with rows outside keep zeroed.
std::vector<double> masked_probabilities(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                                         const KeepSet& keep, std::size_t jobs = 1);

double masked_auc(const ModelBank& models, std::span<const SubjectFeatures> subjects, const KeepSet& keep,
                  std::size_t jobs = 1);

struct ContributionTable {
  std::vector<double> single_auc;      // indexed by image
  double baseline_auc = 0.5;           // keep = {}
  std::vector<std::size_t> ranking;    // by AUC descending, ties by index

  bool positive(std::size_t i) const { return single_auc.at(i) > baseline_auc; }
  std::size_t positive_count() const;
};

ContributionTable single_image_contributions(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                                             std::size_t jobs = 1);

struct CurveEntry {
  std::size_t k = 0;
  double auc = 0.5;
};

std::vector<CurveEntry> topk_auc_curve(const ContributionTable& table, const ModelBank& models,
                                       std::span<const SubjectFeatures> subjects,
                                       std::span<const std::size_t> k_list, std::size_t jobs = 1);

struct DiscardStep {
  std::size_t removed = 0;
  double auc_before = 0.0;
  double auc_after = 0.0;
  std::size_t size_after = 0;
};

struct DiscardOptions {
  double delta = 0.005;
  std::size_t min_size = 1;
  std::size_t jobs = 1;
};

struct DiscardResult {
  KeepSet keep;
  double auc = 0.0;
  std::vector<DiscardStep> log;
};

// Backward elimination: each step drops the index whose removal leaves the
// highest AUC (ties: lower single-image AUC, then lower index). Stops when
// that AUC falls below current - delta or the set reaches min_size.
DiscardResult greedy_discard(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                             const KeepSet& start, const ContributionTable& table,
                             const DiscardOptions& options = {});

void write_contribution_csv(const std::filesystem::path& path, const ContributionTable& table,
                            std::span<const std::string> image_ids);
void write_curve_csv(const std::filesystem::path& path, std::span<const CurveEntry> curve);
void write_discard_json(const std::filesystem::path& path, const DiscardResult& result,
                        std::span<const std::string> image_ids);

}  // namespace gazeclass
