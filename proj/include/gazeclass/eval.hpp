#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gazeclass/cohort.hpp"
#include "gazeclass/two_stream.hpp"

namespace gazeclass {

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

struct CvPlan {
  std::string kind;  // "loocv" or "kfold"
  std::vector<Fold> folds;
};

CvPlan make_loocv_plan(std::span<const std::string> subject_ids);
CvPlan make_kfold_plan(std::span<const std::string> subject_ids, std::size_t k, std::uint64_t seed);

// Throws unless test sets are disjoint, cover every subject, and each fold's
// train set is the complement of its test set.
void validate_plan(const CvPlan& plan, std::span<const std::string> subject_ids);

struct SubjectPrediction {
  std::string subject_id;
  Group label = Group::td;
  std::array<Probabilities, kVariants> probs{};
  std::size_t n_correct = 0;  // variants with p(true group) > 0.5
  double classification_score = 0.0;
  double mean_p_asd = 0.0;

  // Counted as recognized when the classification score is at least 0.6.
  bool correct() const { return n_correct >= 6; }
};

SubjectPrediction make_prediction(std::string subject_id, Group label,
                                  std::span<const Probabilities> probs);

// Evaluates the ten variant instances (which must be variants 0..9, in any
// order) in eval mode. Rows outside `keep` are zeroed in both streams.
SubjectPrediction predict_subject(const AsdNet& model, std::span<const SubjectInstance> instances,
                                  const std::vector<bool>* keep = nullptr);

struct RocPoint {
  double threshold = 0.0;  // +inf for the (0, 0) start
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocResult {
  std::vector<RocPoint> points;
  double auc = 0.5;
};

// Positive class = true. Predict positive when score >= threshold; thresholds
// sweep the distinct scores; AUC by trapezoid.
RocResult roc_auc(std::span<const double> scores, const std::vector<bool>& positive);

struct MetricsReport {
  double subject_acc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double model_acc = 0.0;
  double auc = 0.5;
  std::vector<RocPoint> roc;
};

MetricsReport compute_metrics(std::span<const SubjectPrediction> predictions);

}  // namespace gazeclass
