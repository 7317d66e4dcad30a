#include "gazeclass/contribution.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "gazeclass/parallel.hpp"

namespace gazeclass {

KeepSet::KeepSet(std::vector<std::size_t> indices, std::size_t n_images)
    : indices_(std::move(indices)), n_images_(n_images) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  if (!indices_.empty() && indices_.back() >= n_images_) {
    throw Error("keep set: index " + std::to_string(indices_.back()) + " out of range for " +
                std::to_string(n_images_) + " images");
  }
}

KeepSet KeepSet::all(std::size_t n_images) {
  std::vector<std::size_t> idx(n_images);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return KeepSet(std::move(idx), n_images);
}

bool KeepSet::contains(std::size_t i) const { return std::binary_search(indices_.begin(), indices_.end(), i); }

KeepSet KeepSet::without(std::size_t i) const {
  std::vector<std::size_t> idx;
  for (const auto j : indices_) {
    if (j != i) idx.push_back(j);
  }
  return KeepSet(std::move(idx), n_images_);
}

std::vector<bool> KeepSet::mask() const {
  std::vector<bool> m(n_images_, false);
  for (const auto i : indices_) m[i] = true;
  return m;
}

const AsdNet& ModelBank::model_for(const std::string& subject_id) const {
  if (shared_) return *shared_;
  const auto it = per_subject_.find(subject_id);
  if (it == per_subject_.end() || !it->second) throw Error("model bank has no model for subject '" + subject_id + "'");
  return *it->second;
}

std::size_t ModelBank::n_images() const {
  if (shared_) return shared_->config.n_images;
  if (per_subject_.empty()) throw Error("model bank is empty");
  return per_subject_.begin()->second->config.n_images;
}

std::vector<double> masked_probabilities(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                                         const KeepSet& keep, std::size_t jobs) {
  if (keep.n_images() != models.n_images()) throw Error("keep set size does not match the model's N");
  const auto mask = keep.mask();
  const bool full = keep.size() == keep.n_images();
  std::vector<double> out(subjects.size());
  parallel_for(subjects.size(), jobs, [&](std::size_t s) {
    const auto inst = subjects[s].instances();
    out[s] = predict_subject(models.model_for(subjects[s].id), inst, full ? nullptr : &mask).mean_p_asd;
  });
  return out;
}

namespace {

std::vector<bool> asd_labels(std::span<const SubjectFeatures> subjects) {
  std::vector<bool> y;
  for (const auto& s : subjects) y.push_back(s.label == Group::asd);
  return y;
}

}  // namespace

double masked_auc(const ModelBank& models, std::span<const SubjectFeatures> subjects, const KeepSet& keep,
                  std::size_t jobs) {
  const auto scores = masked_probabilities(models, subjects, keep, jobs);
  return roc_auc(scores, asd_labels(subjects)).auc;
}

std::size_t ContributionTable::positive_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < single_auc.size(); ++i) n += positive(i);
  return n;
}

ContributionTable single_image_contributions(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                                             std::size_t jobs) {
  const auto labels = asd_labels(subjects);
  if (std::count(labels.begin(), labels.end(), true) == 0 || std::count(labels.begin(), labels.end(), false) == 0) {
    throw Error("single_image_contributions: cohort must contain both groups");
  }
  const std::size_t n = models.n_images();
  ContributionTable t;
  t.baseline_auc = masked_auc(models, subjects, KeepSet::none(n), jobs);
  t.single_auc.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.single_auc[i] = masked_auc(models, subjects, KeepSet({i}, n), jobs);
  t.ranking.resize(n);
  std::iota(t.ranking.begin(), t.ranking.end(), std::size_t{0});
  std::stable_sort(t.ranking.begin(), t.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return t.single_auc[a] > t.single_auc[b]; });
  return t;
}

std::vector<CurveEntry> topk_auc_curve(const ContributionTable& table, const ModelBank& models,
                                       std::span<const SubjectFeatures> subjects,
                                       std::span<const std::size_t> k_list, std::size_t jobs) {
  if (k_list.empty()) throw Error("topk_auc_curve: empty k list");
  const std::size_t n = table.ranking.size();
  std::vector<CurveEntry> out;
  for (const auto k : k_list) {
    if (k > n) throw Error("topk_auc_curve: k = " + std::to_string(k) + " exceeds N = " + std::to_string(n));
    KeepSet keep({table.ranking.begin(), table.ranking.begin() + static_cast<std::ptrdiff_t>(k)}, n);
    out.push_back({k, masked_auc(models, subjects, keep, jobs)});
  }
  return out;
}

DiscardResult greedy_discard(const ModelBank& models, std::span<const SubjectFeatures> subjects,
                             const KeepSet& start, const ContributionTable& table, const DiscardOptions& options) {
  if (start.size() == 0) throw Error("greedy_discard: start set is empty");
  if (!(options.delta >= 0.0)) throw Error("greedy_discard: delta must be non-negative");
  const std::size_t min_size = std::max<std::size_t>(options.min_size, 1);
  DiscardResult r{start, masked_auc(models, subjects, start, options.jobs), {}};
  while (r.keep.size() > min_size) {
    const auto& idx = r.keep.indices();
    std::size_t best = idx[0];
    double best_auc = -1.0;
    for (const auto i : idx) {
      const double auc = masked_auc(models, subjects, r.keep.without(i), options.jobs);
      const bool better = auc > best_auc ||
                          (auc == best_auc && table.single_auc.at(i) < table.single_auc.at(best));
      if (better) {
        best = i;
        best_auc = auc;
      }
    }
    if (best_auc < r.auc - options.delta) break;
    r.log.push_back({best, r.auc, best_auc, r.keep.size() - 1});
    r.keep = r.keep.without(best);
    r.auc = best_auc;
  }
  return r;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  return f;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_contribution_csv(const std::filesystem::path& path, const ContributionTable& table,
                            std::span<const std::string> image_ids) {
  if (image_ids.size() != table.single_auc.size()) throw Error("contribution CSV: image id count mismatch");
  auto f = open_out(path);
  f << "image_id,single_auc,positive,rank\n";
  std::vector<std::size_t> rank(table.ranking.size());
  for (std::size_t r = 0; r < table.ranking.size(); ++r) rank[table.ranking[r]] = r + 1;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    f << image_ids[i] << ',' << fmt(table.single_auc[i]) << ',' << (table.positive(i) ? "true" : "false") << ','
      << rank[i] << '\n';
  }
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurveEntry> curve) {
  auto f = open_out(path);
  f << "k,auc\n";
  for (const auto& e : curve) f << e.k << ',' << fmt(e.auc) << '\n';
}

void write_discard_json(const std::filesystem::path& path, const DiscardResult& result,
                        std::span<const std::string> image_ids) {
  if (image_ids.size() != result.keep.n_images()) throw Error("discard JSON: image id count mismatch");
  nlohmann::ordered_json j;
  j["final_auc"] = result.auc;
  auto& keep = j["keep"] = nlohmann::ordered_json::array();
  for (const auto i : result.keep.indices()) keep.push_back(image_ids[i]);
  auto& log = j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : result.log) {
    nlohmann::ordered_json step;
    step["removed"] = image_ids[s.removed];
    step["auc_before"] = s.auc_before;
    step["auc_after"] = s.auc_after;
    step["size_after"] = s.size_after;
    log.push_back(std::move(step));
  }
  auto f = open_out(path);
  f << j.dump(2) << '\n';
}

}  // namespace gazeclass
