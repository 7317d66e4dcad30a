#include "gazeclass/eval.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "gazeclass/rng.hpp"

namespace gazeclass {

namespace {

Fold complement_fold(std::span<const std::string> ids, std::vector<std::string> test) {
  const std::set<std::string> in_test(test.begin(), test.end());
  Fold f;
  for (const auto& id : ids) {
    if (!in_test.count(id)) f.train.push_back(id);
  }
  f.test = std::move(test);
  return f;
}

}  // namespace

CvPlan make_loocv_plan(std::span<const std::string> ids) {
  if (ids.size() < 2) throw Error("leave-one-out needs at least 2 subjects");
  CvPlan plan{"loocv", {}};
  for (const auto& id : ids) plan.folds.push_back(complement_fold(ids, {id}));
  validate_plan(plan, ids);
  return plan;
}

CvPlan make_kfold_plan(std::span<const std::string> ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error("k-fold needs k >= 2");
  if (k > ids.size()) throw Error("k-fold: k exceeds the number of subjects");
  std::vector<std::string> shuffled(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, 0x6b666f6cULL));
  rng.shuffle(shuffled.begin(), shuffled.end());
  CvPlan plan{"kfold", {}};
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    std::vector<std::string> test(shuffled.begin() + pos, shuffled.begin() + pos + len);
    pos += len;
    plan.folds.push_back(complement_fold(ids, std::move(test)));
  }
  validate_plan(plan, ids);
  return plan;
}

void validate_plan(const CvPlan& plan, std::span<const std::string> ids) {
  const std::set<std::string> all(ids.begin(), ids.end());
  if (all.size() != ids.size()) throw Error("CV plan: duplicate subject ids");
  std::set<std::string> seen;
  for (const auto& f : plan.folds) {
    if (f.test.empty()) throw Error("CV plan: empty test set");
    const std::set<std::string> train(f.train.begin(), f.train.end());
    for (const auto& t : f.test) {
      if (!all.count(t)) throw Error("CV plan: unknown subject '" + t + "'");
      if (!seen.insert(t).second) throw Error("CV plan: subject '" + t + "' tested twice");
      if (train.count(t)) throw Error("CV plan: subject '" + t + "' is in train and test");
    }
    if (train.size() + f.test.size() != all.size()) throw Error("CV plan: fold does not cover the cohort");
  }
  if (seen != all) throw Error("CV plan: test sets do not cover every subject");
}

SubjectPrediction make_prediction(std::string subject_id, Group label, std::span<const Probabilities> probs) {
  if (probs.size() != kVariants) {
    throw Error("prediction for '" + subject_id + "' needs " + std::to_string(kVariants) +
                " variants, got " + std::to_string(probs.size()));
  }
  SubjectPrediction p;
  p.subject_id = std::move(subject_id);
  p.label = label;
  double sum = 0.0;
  for (std::size_t v = 0; v < kVariants; ++v) {
    p.probs[v] = probs[v];
    const double p_true = label == Group::asd ? probs[v].p_asd : probs[v].p_td;
    p.n_correct += p_true > 0.5 ? 1 : 0;
    sum += probs[v].p_asd;
  }
  p.classification_score = static_cast<double>(p.n_correct) / static_cast<double>(kVariants);
  p.mean_p_asd = sum / static_cast<double>(kVariants);
  return p;
}

SubjectPrediction predict_subject(const AsdNet& model, std::span<const SubjectInstance> instances,
                                  const std::vector<bool>* keep) {
  if (instances.empty()) throw Error("predict_subject: no instances");
  std::array<Probabilities, kVariants> probs{};
  std::array<bool, kVariants> have{};
  for (const auto& inst : instances) {
    if (inst.variant >= kVariants) throw Error("predict_subject: variant out of range");
    if (inst.subject_id != instances[0].subject_id) throw Error("predict_subject: mixed subjects");
    probs[inst.variant] =
        fuse_and_classify(model, *inst.image_features, *inst.hfm_features, Mode::eval, std::nullopt, keep);
    have[inst.variant] = true;
  }
  for (std::size_t v = 0; v < kVariants; ++v) {
    if (!have[v]) {
      throw Error("predict_subject: subject '" + instances[0].subject_id + "' is missing variant " +
                  std::to_string(v));
    }
  }
  return make_prediction(instances[0].subject_id, instances[0].label, probs);
}

RocResult roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw Error("roc_auc: scores and labels differ in length");
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = positive.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("roc_auc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (positive[order[i]] ? tp : fp) += 1;
      ++i;
    }
    r.points.push_back({thr, static_cast<double>(fp) / n_neg, static_cast<double>(tp) / n_pos});
  }
  // Integrate in counts so ties contribute exactly half credit.
  double area = 0.0;
  std::size_t prev_tp = 0, prev_fp = 0;
  tp = fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (positive[order[i]] ? tp : fp) += 1;
      ++i;
    }
    area += static_cast<double>(fp - prev_fp) * static_cast<double>(tp + prev_tp);
    prev_tp = tp;
    prev_fp = fp;
  }
  r.auc = area / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
  return r;
}

MetricsReport compute_metrics(std::span<const SubjectPrediction> predictions) {
  if (predictions.empty()) throw Error("compute_metrics: no predictions");
  MetricsReport m;
  std::size_t correct = 0, pos = 0, pos_ok = 0, neg = 0, neg_ok = 0;
  double score_sum = 0.0;
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& p : predictions) {
    const bool ok = p.correct();
    correct += ok;
    score_sum += p.classification_score;
    if (p.label == Group::asd) {
      ++pos;
      pos_ok += ok;
    } else {
      ++neg;
      neg_ok += ok;
    }
    scores.push_back(p.mean_p_asd);
    labels.push_back(p.label == Group::asd);
  }
  const auto n = static_cast<double>(predictions.size());
  m.subject_acc = static_cast<double>(correct) / n;
  m.model_acc = score_sum / n;
  if (pos == 0 || neg == 0) throw Error("compute_metrics: need at least one subject per class");
  m.sensitivity = static_cast<double>(pos_ok) / static_cast<double>(pos);
  m.specificity = static_cast<double>(neg_ok) / static_cast<double>(neg);
  auto roc = roc_auc(scores, labels);
  m.auc = roc.auc;
  m.roc = std::move(roc.points);
  return m;
}

}  // namespace gazeclass
