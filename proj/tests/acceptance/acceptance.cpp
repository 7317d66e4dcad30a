// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "helpers.hpp"

#include "gazeclass/attribution.hpp"
#include "gazeclass/augment.hpp"
#include "gazeclass/contribution.hpp"
#include "gazeclass/eval.hpp"
#include "gazeclass/experiment.hpp"
#include "gazeclass/gzc1.hpp"
#include "gazeclass/tsne.hpp"

using namespace gazeclass;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Outcome {
  bool passed = true;
  std::string detail;

  // Records a failed condition; the detail keeps every measured value.
  void require(bool ok, const std::string& what) {
    if (!ok) passed = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [failed]");
  }
};

int failures = 0;

void criterion(int id, const char* name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.require(false, std::string("exception: ") + e.what());
  }
  if (!o.passed) ++failures;
  std::cout << (o.passed ? "PASS " : "FAIL ") << id << " " << name << ": " << o.detail << " (" << num(seconds_since(t0))
            << " s)" << std::endl;
}

// ---------------------------------------------------------------------------

void gradients(Outcome& o) {
  const auto t0 = Clock::now();
  struct Case {
    const char* name;
    Shape in;
    std::vector<LayerSpec> layers;
    Mode mode = Mode::eval;
  };
  const std::vector<Case> cases = {
      {"dense", {5}, {dense("fc1", 4), dense("fc2", 2)}},
      {"conv", {2, 6, 6}, {conv2d("c1", 3, 3, 1, 1), conv2d("c2", 2, 2, 2), flatten("f"), dense("fc", 2)}},
      {"relu", {6}, {dense("fc1", 5), relu("r"), dense("fc2", 2)}},
      {"maxpool", {2, 6, 6}, {conv2d("c", 3, 3, 1, 1), maxpool2d("p", 2, 2), flatten("f"), dense("fc", 2)}},
      {"dropout", {6}, {dense("fc1", 8), dropout("d", 0.5), dense("fc2", 2)}, Mode::train},
      {"softmax", {4}, {dense("fc", 3), softmax("prob")}},
      {"composite", {1, 8, 8}, {conv2d("c1", 4, 3, 1, 1), relu("r1"), maxpool2d("p1", 2, 2), flatten("f"),
                                dense("fc1", 6), relu("r2"), dense("fc2", 2), softmax("prob")}},
  };
  double worst = 0.0;
  for (const auto& c : cases) {
    Network<double> net(c.in, c.layers);
    net.initialize(11);
    Rng rng(12);
    for (std::size_t i = 0; i < net.size(); ++i)
      if (net.has_params(i))
        for (auto& b : net.params(i).bias.data()) b = 0.1 * rng.normal();
    const auto x = testing::random_tensor<double>(c.in, 13);
    GradCheckOptions opt;
    opt.h = 1e-5;
    opt.tolerance = 1e-4;
    opt.mode = c.mode;
    opt.seed = 5;
    const auto r = grad_check(net, x, 1, opt);
    worst = std::max(worst, r.max_rel_error);
    o.require(r.passed() && r.max_rel_error < 1e-4, std::string(c.name) + " " + num(r.max_rel_error));
  }
  const double t = seconds_since(t0);
  o.require(t < 30.0, "max rel err " + num(worst) + " in " + num(t) + " s");
}

std::vector<SourcePlanes> random_sources(std::size_t n, std::size_t planes, std::uint64_t seed) {
  std::vector<SourcePlanes> out(n);
  Rng rng(seed);
  for (auto& s : out)
    for (std::size_t p = 0; p < planes; ++p) {
      Grid g(256, 256);
      for (auto& v : g.values) v = rng.uniform();
      s.push_back(std::move(g));
    }
  return out;
}

void lrp_conservation(Outcome& o) {
  const auto bb = make_backbone({BackboneKind::tiny, 4}, 3).cast<double>();
  const auto img = random_sources(3, 3, 1);
  const auto hfm = random_sources(3, 1, 2);
  AsdNetConfig c;
  c.n_images = 3;
  c.dim = 4;
  c.hidden = 8;
  c.fc_init = Init::xavier;
  c.bias = false;
  c.standardize = false;
  const auto free_head = make_asdnet(c, 5).net.cast<double>();
  double worst_cons = 0.0;
  for (std::size_t v : {0u, 4u, 7u}) {
    for (std::size_t target : {0u, 1u}) {
      worst_cons = std::max(worst_cons, lrp_two_stream(bb, free_head, img, hfm, v, target).conservation_error());
    }
  }
  o.require(worst_cons < 1e-3, "bias-free relative error " + num(worst_cons));

  c.bias = true;
  auto biased = make_asdnet(c, 6).net.cast<double>();
  Rng rng(7);
  for (std::size_t i = 0; i < biased.size(); ++i)
    if (biased.has_params(i))
      for (auto& b : biased.params(i).bias.data()) b = 0.2 * rng.normal();
  const auto r = lrp_two_stream(bb, biased, img, hfm, 2, 1);
  o.require(r.bias_dropped != 0.0 && r.accounting_error() <= 1e-9,
            "biased deficit vs tracked bias " + num(r.accounting_error()));

  bool exact = true;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Grid g(16, 11);
    Rng gr(seed);
    for (auto& v : g.values) v = double(std::int64_t(gr.below(129)) - 64) / 64.0;
    for (double q : {0.5, 0.75, 0.9, 1.0}) {
      std::vector<double> mags;
      for (double v : g.values) mags.push_back(std::abs(v));
      std::sort(mags.rbegin(), mags.rend());
      const double total = std::accumulate(mags.begin(), mags.end(), 0.0);
      double cum = 0.0, expect = 0.0;
      for (double m : mags) {
        cum += m;
        if (cum >= q * total) {
          expect = m;
          break;
        }
      }
      const auto mk = important_mask_by_mass(g, q);
      exact = exact && mk.threshold == expect;
      for (std::size_t i = 0; i < g.size(); ++i) exact = exact && bool(mk.mask[i]) == (std::abs(g.values[i]) >= expect);
    }
  }
  o.require(exact, "mass-quantile mask matches the sort-and-accumulate oracle on 80 cases");
}

double pair_count_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double num = 0.0, np = 0.0, nn = 0.0;
  for (bool p : pos) (p ? np : nn) += 1;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
  return num / (np * nn);
}

void auc_oracle(Outcome& o) {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + rng.below(40);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? std::round(rng.uniform() * 6) / 6 : rng.uniform();
      pos[i] = rng.uniform() < 0.5;
    }
    pos[0] = true;
    pos[1] = false;
    worst = std::max(worst, std::abs(roc_auc(s, pos).auc - pair_count_auc(s, pos)));
  }
  o.require(worst < 1e-12, "max |trapezoid - pair count| over 200 fixtures " + num(worst));
  const std::vector<double> ties(12, 0.3);
  std::vector<bool> pos(12);
  for (std::size_t i = 0; i < 12; i += 3) pos[i] = true;
  const double t = roc_auc(ties, pos).auc;
  o.require(t == 0.5, "all-ties AUC " + num(t));
}

std::vector<std::pair<std::size_t, std::size_t>> nonzero(const Grid& g) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c)
      if (g.at(r, c) != 0.0) out.emplace_back(r, c);
  return out;
}

void augmentation(Outcome& o) {
  Grid marker(256, 256);
  marker.at(128, 128) = 1.0;
  marker.at(3, 5) = 2.0;
  const auto v = augment10(marker);
  o.require(v.size() == 10, "variants " + std::to_string(v.size()));
  bool offsets = true;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto [r0, c0] = kCropOffsets[k];
    const auto nz = nonzero(v[k]);
    // The center marker lands in every crop; the corner marker only in the top-left one.
    const std::size_t expect_count = k == 0 ? 2 : 1;
    offsets = offsets && nz.size() == expect_count && v[k].width == 224 && v[k].height == 224;
    offsets = offsets && v[k].at(128 - r0, 128 - c0) == 1.0;
    if (k == 0) offsets = offsets && v[k].at(3, 5) == 2.0;
    offsets = offsets && v[k + 5].at(128 - r0, 223 - (128 - c0)) == 1.0;
  }
  o.require(offsets, "marker pixels at the documented crop offsets");

  Grid ramp(37, 19);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp.values[i] = std::sin(0.37 * double(i));
  bool involution = hflip(hflip(ramp)) == ramp;
  for (std::size_t k = 0; k < 5; ++k) involution = involution && hflip(v[k + 5]) == v[k];
  o.require(involution, "flip involution");

  StimulusImage img{320, 240, std::vector<std::uint8_t>(320 * 240 * 3, 0)};
  const std::size_t mr = 70, mc = 200;
  for (std::size_t ch = 0; ch < 3; ++ch) img.rgb[(mr * 320 + mc) * 3 + ch] = 255;
  FixationMap map;
  map.grid = Grid(320, 240);
  map.grid.at(mr, mc) = 1.0;
  const auto is = image_source(img);
  const auto hs = hfm_source(map);
  double worst = 0.0;
  for (std::size_t k = 0; k < kVariants; ++k) {
    const auto a = variant_input<double>(is, k);
    const auto b = variant_input<double>(hs, k);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  o.require(worst < 1e-12, "image/HFM registration max diff " + num(worst));
}

SubjectPrediction scored(Group label, std::size_t n_correct) {
  std::vector<Probabilities> probs;
  for (std::size_t v = 0; v < kVariants; ++v) {
    const double pt = v < n_correct ? 0.9 : 0.2;
    probs.push_back(label == Group::asd ? Probabilities{1 - pt, pt} : Probabilities{pt, 1 - pt});
  }
  return make_prediction("s" + std::to_string(n_correct), label, probs);
}

void scoring(Outcome& o) {
  const auto six = scored(Group::asd, 6);
  o.require(six.classification_score == 0.6 && six.correct(), "6/10 -> 0.6 correct");
  const auto five = scored(Group::td, 5);
  o.require(five.classification_score == 0.5 && !five.correct(), "5/10 -> 0.5 incorrect");
  std::vector<SubjectPrediction> preds;
  double mean = 0.0;
  for (std::size_t k = 0; k <= 10; ++k) {
    preds.push_back(scored(k % 2 ? Group::asd : Group::td, k));
    mean += double(k) / 10.0;
  }
  mean /= 11.0;
  const auto m = compute_metrics(preds);
  o.require(std::abs(m.model_acc - mean) < 1e-15, "model accuracy " + num(m.model_acc) + " = mean score");
  o.require(std::abs(m.subject_acc - 5.0 / 11.0) < 1e-15, "subject accuracy " + num(m.subject_acc));
}

bool partitions(const CvPlan& plan, const std::vector<std::string>& ids) {
  std::vector<std::string> tested;
  for (const auto& f : plan.folds) {
    if (f.train.size() + f.test.size() != ids.size()) return false;
    for (const auto& t : f.test) {
      if (std::find(f.train.begin(), f.train.end(), t) != f.train.end()) return false;
      tested.push_back(t);
    }
  }
  std::sort(tested.begin(), tested.end());
  auto sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  return tested == sorted;
}

void cv_plans(Outcome& o) {
  std::vector<std::string> ids;
  for (int i = 0; i < 39; ++i) ids.push_back("subj" + std::to_string(i));
  const auto loo = make_loocv_plan(ids);
  o.require(loo.folds.size() == 39 && partitions(loo, ids), "LOOCV " + std::to_string(loo.folds.size()) + " folds");
  const auto k13 = make_kfold_plan(ids, 13, 1);
  bool threes = k13.folds.size() == 13 && partitions(k13, ids);
  for (const auto& f : k13.folds) threes = threes && f.test.size() == 3;
  o.require(threes, "13-fold test sets of exactly 3");
}

// ---------------------------------------------------------------------------

void benchmark(Outcome& o) {
  testing::TempDir dir("accept-e2e");
  std::ostringstream log;
  auto c = default_config();
  c.output_dir = (dir / "runs").string();
  const auto t0 = Clock::now();
  const auto run = cmd_run(c, {"loocv", 1, std::nullopt}, log);
  const double t = seconds_since(t0);
  const auto& m = run.metrics;
  o.require(m.subject_acc >= 0.9, "LOOCV subject acc " + num(m.subject_acc));
  o.require(m.auc >= 0.95, "AUC " + num(m.auc));
  o.require(t < 600.0, "runtime " + num(t) + " s");

  double total = 0.0;
  std::string each;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    auto n = default_config();
    n.synth.center_bias_td = 0.0;
    n.synth.center_bias_asd = 0.0;
    n.synth.seed = 100 + s;
    n.cv.mode = "kfold";
    n.cv.k = 5;
    n.cv.seed = s;
    n.seed = s;
    n.output_dir = (dir / "runs").string();
    const double auc = cmd_run(n, {"null" + std::to_string(s), 1, std::nullopt}, log).metrics.auc;
    total += auc;
    each += (each.empty() ? "" : " ") + num(auc);
  }
  const double mean = total / 5.0;
  o.require(mean >= 0.35 && mean <= 0.65, "null cohort mean AUC " + num(mean) + " over 5 seeds (" + each + ")");
}

void contribution(Outcome& o) {
  constexpr std::size_t kSignal = 7;
  auto config = default_config();
  config.synth.signal_images = {kSignal};
  config.synth.seed = 17;
  const auto cohort = synth_cohort(config.synth, config.hfm);
  const auto backbone = build_backbone(config.backbone);
  FeatureCache cache;
  FeatureExtractor extractor(backbone, &cache);
  const auto subjects = extract_cohort_features(cohort, extractor);
  std::vector<SubjectInstance> all;
  for (const auto& s : subjects)
    for (auto& i : s.instances()) all.push_back(i);
  auto head = config.head;
  head.n_images = cohort.n_images();
  head.dim = config.backbone.config.feature_dim;
  const auto model = train_asdnet(head, all, config.train, 5).model;
  const ModelBank bank(model);

  const auto n = cohort.n_images();
  const auto full = masked_probabilities(bank, subjects, KeepSet::all(n));
  bool identical = true;
  for (std::size_t s = 0; s < subjects.size(); ++s)
    identical = identical && full[s] == predict_subject(model, subjects[s].instances()).mean_p_asd;
  o.require(identical, "keep-all bit-identical to unmasked");
  const double base = masked_auc(bank, subjects, KeepSet::none(n));
  o.require(base == 0.5, "keep-none AUC " + num(base));

  const auto table = single_image_contributions(bank, subjects);
  o.require(table.ranking[0] == kSignal, "top image " + std::to_string(table.ranking[0]) + " (signal " +
                                             std::to_string(kSignal) + ", AUC " + num(table.single_auc[kSignal]) + ")");
  const auto discard = greedy_discard(bank, subjects, KeepSet::all(n), table);
  o.require(discard.keep.contains(kSignal) && discard.keep.size() < n,
            "greedy keeps signal with " + std::to_string(discard.keep.size()) + "/" + std::to_string(n) +
                " images, AUC " + num(discard.auc));
}

PointMatrix two_clusters(std::size_t n, std::size_t dim, double separation, std::uint64_t seed,
                         std::vector<int>& labels) {
  PointMatrix x(n, dim);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = i < n / 2 ? 0 : 1;
    labels.push_back(c);
    for (std::size_t d = 0; d < dim; ++d) x.row(i)[d] = rng.normal() + (c ? separation : 0.0) * (d % 2 ? 1 : -1);
  }
  return x;
}

void embedding(Outcome& o) {
  std::vector<int> labels;
  const auto x = two_clusters(40, 512, 0.5, 9, labels);
  const auto e = tsne(x);
  const double s = silhouette_score(e.coords, labels);
  o.require(s > 0.5, "silhouette " + num(s));
  const auto kl = kl_trace_check(e);
  o.require(kl.passed, "KL moving average non-increasing over " + std::to_string(kl.windows) + " windows");
  const auto again = tsne(x);
  o.require(again.coords.values == e.coords.values && again.kl == e.kl, "deterministic per seed");
}

void persistence(Outcome& o) {
  testing::TempDir dir("accept-gzc");
  WeightSet w;
  w.push_back({"a", testing::random_tensor<float>({3, 4, 5}, 1)});
  w.push_back({"b", testing::random_tensor<float>({7}, 2)});
  const auto bytes = encode_gzc1(w);
  o.require(encode_gzc1(decode_gzc1(bytes)) == bytes, "GZC1 encode/decode byte-identical");

  auto config = default_config();
  config.synth.n_per_group = 5;
  config.synth.n_images = 6;
  config.synth.width = 96;
  config.synth.height = 72;
  config.train.max_iter = 60;
  config.cv.mode = "kfold";
  config.cv.k = 5;
  config.output_dir = (dir / "runs").string();
  std::ostringstream log;
  cmd_synth(config, {dir / "data", false}, log);
  config.dataset = (dir / "data").string();
  const auto a = cmd_run(config, {"a", 1, std::nullopt}, log);
  const auto b = cmd_run(config, {"b", 1, dir / "cache"}, log);
  const auto c = cmd_run(config, {"c", 1, dir / "cache"}, log);
  o.require(c.cache_hits > 0 && testing::trees_equal(a.run_dir, b.run_dir) && testing::trees_equal(a.run_dir, c.run_dir),
            "cmd_run byte-reproducible (cold, cold cache, warm cache)");

  const auto model_path = a.run_dir / "models" / "fold_000.gzc";
  const auto model = load_model(model_path);
  save_model(model, dir / "again.gzc");
  o.require(testing::read_bytes(model_path) == testing::read_bytes(dir / "again.gzc"), "model save/load/save byte-identical");
  const auto run = load_run(a.run_dir);
  bool same = true;
  for (const auto& s : run.subjects)
    for (const auto& inst : s.instances()) {
      const auto p = fuse_and_classify(run.models[0], *inst.image_features, *inst.hfm_features, Mode::eval);
      const auto q = fuse_and_classify(model, *inst.image_features, *inst.hfm_features, Mode::eval);
      same = same && p.p_asd == q.p_asd && p.p_td == q.p_td;
    }
  const auto saved = nlohmann::json::parse(std::string(testing::read_bytes(a.run_dir / "folds" / "fold_000.json").data(),
                                                       testing::read_bytes(a.run_dir / "folds" / "fold_000.json").size()));
  for (const auto& p : saved.at("predictions")) {
    const auto id = p.at("subject_id").get<std::string>();
    const auto it = std::find_if(run.subjects.begin(), run.subjects.end(), [&](const auto& s) { return s.id == id; });
    same = same && it != run.subjects.end() &&
           predict_subject(model, it->instances()).mean_p_asd == p.at("mean_p_asd").get<double>();
  }
  o.require(same, "reloaded model reproduces eval probabilities bit for bit");
}

}  // namespace

int main() {
  criterion(1, "gradient correctness", gradients);
  criterion(2, "LRP conservation", lrp_conservation);
  criterion(3, "AUC oracle equivalence", auc_oracle);
  criterion(4, "augmentation exactness", augmentation);
  criterion(5, "scoring rules", scoring);
  criterion(6, "CV plans", cv_plans);
  criterion(7, "end-to-end synthetic benchmark", benchmark);
  criterion(8, "contribution analysis", contribution);
  criterion(9, "t-SNE", embedding);
  criterion(10, "persistence", persistence);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
