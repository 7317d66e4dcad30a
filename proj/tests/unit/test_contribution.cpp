#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "json.hpp"

#include "gazeclass/contribution.hpp"

using namespace gazeclass;

namespace {

constexpr std::size_t kN = 6;
constexpr std::size_t kD = 4;
constexpr std::size_t kSignal = 2;

std::shared_ptr<const FeatureMatrix> noise(Stream s, std::uint64_t seed, bool signal, bool asd) {
  FeatureMatrix m{kN, kD, s, std::vector<float>(kN * kD)};
  Rng rng(seed);
  for (auto& v : m.values) v = static_cast<float>(rng.normal());
  if (signal) {
    for (std::size_t d = 0; d < kD; ++d) m.values[kSignal * kD + d] += asd ? 1.5f : -1.5f;
  }
  return std::make_shared<const FeatureMatrix>(std::move(m));
}

// Only image kSignal's fixation row separates the groups.
std::vector<SubjectFeatures> planted_cohort(std::size_t per_group, std::uint64_t seed) {
  std::vector<SubjectFeatures> out;
  std::array<std::shared_ptr<const FeatureMatrix>, kVariants> shared_image;
  for (std::size_t v = 0; v < kVariants; ++v) shared_image[v] = noise(Stream::image, derive_seed(seed, 999, v), false, false);
  for (std::size_t s = 0; s < 2 * per_group; ++s) {
    SubjectFeatures f;
    f.id = "s" + std::to_string(s);
    f.label = s < per_group ? Group::asd : Group::td;
    for (std::size_t v = 0; v < kVariants; ++v) {
      f.image[v] = shared_image[v];
      f.hfm[v] = noise(Stream::hfm, derive_seed(seed, s, v), true, f.label == Group::asd);
    }
    out.push_back(std::move(f));
  }
  return out;
}

AsdNet train_on(const std::vector<SubjectFeatures>& cohort, bool standardize) {
  std::vector<SubjectInstance> inst;
  for (const auto& s : cohort)
    for (auto& i : s.instances()) inst.push_back(i);
  AsdNetConfig c;
  c.n_images = kN;
  c.dim = kD;
  c.hidden = 32;
  c.standardize = standardize;
  TrainHyper h;
  h.sgd.base_lr = 1e-3;
  h.max_iter = 400;
  return train_asdnet(c, inst, h, 3).model;
}

struct Fixture {
  std::vector<SubjectFeatures> cohort = planted_cohort(8, 4);
  AsdNet model = train_on(cohort, true);
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::vector<double> unmasked_scores(const AsdNet& m, const std::vector<SubjectFeatures>& cohort) {
  std::vector<double> out;
  for (const auto& s : cohort) out.push_back(predict_subject(m, s.instances()).mean_p_asd);
  return out;
}

std::vector<bool> labels(const std::vector<SubjectFeatures>& cohort) {
  std::vector<bool> y;
  for (const auto& s : cohort) y.push_back(s.label == Group::asd);
  return y;
}

}  // namespace

TEST_SUITE("contribution") {
  TEST_CASE("keep sets") {
    const KeepSet k({3, 1, 3, 0}, 5);
    CHECK(k.indices() == std::vector<std::size_t>{0, 1, 3});
    CHECK(k.contains(1));
    CHECK_FALSE(k.contains(2));
    CHECK(k.without(1).indices() == std::vector<std::size_t>{0, 3});
    CHECK(k.mask() == std::vector<bool>{true, true, false, true, false});
    CHECK(KeepSet::all(3).size() == 3);
    CHECK(KeepSet::none(3).size() == 0);
    CHECK_THROWS(KeepSet({5}, 5));
  }

  TEST_CASE("full keep is bit-identical to unmasked evaluation") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto masked = masked_probabilities(bank, f.cohort, KeepSet::all(kN));
    const auto plain = unmasked_scores(f.model, f.cohort);
    REQUIRE(masked.size() == plain.size());
    for (std::size_t s = 0; s < plain.size(); ++s) CHECK(masked[s] == plain[s]);
    CHECK(masked_auc(bank, f.cohort, KeepSet::all(kN)) == roc_auc(plain, labels(f.cohort)).auc);
  }

  TEST_CASE("empty keep gives every subject the same score and AUC 0.5") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto p = masked_probabilities(bank, f.cohort, KeepSet::none(kN));
    for (double v : p) CHECK(v == p[0]);
    CHECK(masked_auc(bank, f.cohort, KeepSet::none(kN)) == 0.5);
  }

  TEST_CASE("single-row keep equals a constructed single-row input") {
    auto& f = fixture();
    const std::size_t i = 4;
    const ModelBank bank(f.model);
    const auto masked = masked_probabilities(bank, f.cohort, KeepSet({i}, kN));
    for (std::size_t s = 0; s < 3; ++s) {
      double sum = 0.0;
      for (const auto& inst : f.cohort[s].instances()) {
        // Standardize the full input, then keep only row i of both streams.
        auto x = head_input<float>(f.model, *inst.image_features, *inst.hfm_features);
        for (std::size_t st = 0; st < 2; ++st)
          for (std::size_t r = 0; r < kN; ++r)
            if (r != i)
              for (std::size_t d = 0; d < kD; ++d) x[(st * kN + r) * kD + d] = 0.0f;
        sum += forward(f.model.net, x, Mode::eval).output()[1];
      }
      CHECK(masked[s] == doctest::Approx(sum / kVariants).epsilon(1e-6));
    }

    // Without a standardizer the masked input is the raw row itself.
    const auto raw_model = train_on(f.cohort, false);
    const ModelBank raw_bank(raw_model);
    const auto raw_masked = masked_probabilities(raw_bank, f.cohort, KeepSet({i}, kN));
    for (std::size_t s = 0; s < 3; ++s) {
      double sum = 0.0;
      for (const auto& inst : f.cohort[s].instances()) {
        FeatureMatrix img = *inst.image_features, hfm = *inst.hfm_features;
        for (std::size_t r = 0; r < kN; ++r)
          if (r != i)
            for (std::size_t d = 0; d < kD; ++d) img.values[r * kD + d] = hfm.values[r * kD + d] = 0.0f;
        sum += fuse_and_classify(raw_model, img, hfm, Mode::eval).p_asd;
      }
      CHECK(raw_masked[s] == doctest::Approx(sum / kVariants).epsilon(1e-12));
    }
  }

  TEST_CASE("masking twice with a superset is idempotent") {
    auto& f = fixture();
    const auto& inst = f.cohort[0].instances()[3];
    const KeepSet inner({1, 4}, kN), outer({0, 1, 4, 5}, kN);
    const auto mi = inner.mask(), mo = outer.mask();
    const auto once = head_input<double>(f.model, *inst.image_features, *inst.hfm_features, &mi);
    auto twice = head_input<double>(f.model, *inst.image_features, *inst.hfm_features, &mo);
    for (std::size_t st = 0; st < 2; ++st)
      for (std::size_t r = 0; r < kN; ++r)
        if (!mi[r])
          for (std::size_t d = 0; d < kD; ++d) twice[(st * kN + r) * kD + d] = 0.0;
    CHECK(once == twice);
  }

  TEST_CASE("the planted image ranks first") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto t = single_image_contributions(bank, f.cohort);
    CHECK(t.baseline_auc == 0.5);
    REQUIRE(t.ranking.size() == kN);
    CHECK(t.ranking[0] == kSignal);
    CHECK(t.positive(kSignal));
    CHECK(t.single_auc[kSignal] > 0.9);
    std::vector<std::size_t> sorted = t.ranking;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < kN; ++i) CHECK(sorted[i] == i);
    for (std::size_t r = 1; r < kN; ++r) {
      const auto a = t.ranking[r - 1], b = t.ranking[r];
      CHECK((t.single_auc[a] > t.single_auc[b] || (t.single_auc[a] == t.single_auc[b] && a < b)));
    }
    const auto again = single_image_contributions(bank, f.cohort);
    CHECK(again.ranking == t.ranking);
    CHECK(again.single_auc == t.single_auc);
  }

  TEST_CASE("top-k curve endpoints") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto t = single_image_contributions(bank, f.cohort);
    const std::vector<std::size_t> ks = {0, 1, 2, kN};
    const auto curve = topk_auc_curve(t, bank, f.cohort, ks);
    REQUIRE(curve.size() == 4);
    CHECK(curve[0].auc == t.baseline_auc);
    CHECK(curve[1].auc == t.single_auc[t.ranking[0]]);
    CHECK(curve[3].auc == roc_auc(unmasked_scores(f.model, f.cohort), labels(f.cohort)).auc);
    CHECK(curve[1].auc >= curve[0].auc);
    CHECK_THROWS(topk_auc_curve(t, bank, f.cohort, std::vector<std::size_t>{}));
    CHECK_THROWS(topk_auc_curve(t, bank, f.cohort, std::vector<std::size_t>{kN + 1}));
  }

  TEST_CASE("greedy discard keeps the signal and drops noise") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto t = single_image_contributions(bank, f.cohort);
    const auto r = greedy_discard(bank, f.cohort, KeepSet::all(kN), t);
    CHECK(r.keep.contains(kSignal));
    CHECK(r.keep.size() < kN);
    for (const auto& step : r.log) CHECK(step.removed != kSignal);
    // Every logged AUC matches an independent recomputation.
    KeepSet cur = KeepSet::all(kN);
    for (const auto& step : r.log) {
      CHECK(step.auc_before == roc_auc(masked_probabilities(bank, f.cohort, cur), labels(f.cohort)).auc);
      cur = cur.without(step.removed);
      CHECK(step.auc_after == roc_auc(masked_probabilities(bank, f.cohort, cur), labels(f.cohort)).auc);
      CHECK(step.size_after == cur.size());
      CHECK(step.auc_after >= step.auc_before - 0.005);
    }
    CHECK(cur.indices() == r.keep.indices());
    CHECK(r.auc == masked_auc(bank, f.cohort, r.keep));

    const auto same = greedy_discard(bank, f.cohort, KeepSet::all(kN), t);
    CHECK(same.keep.indices() == r.keep.indices());
    CHECK(same.log.size() == r.log.size());
  }

  TEST_CASE("huge delta discards down to min_size") {
    auto& f = fixture();
    const ModelBank bank(f.model);
    const auto t = single_image_contributions(bank, f.cohort);
    const auto r = greedy_discard(bank, f.cohort, KeepSet::all(kN), t, {.delta = 1e9, .min_size = 2});
    CHECK(r.keep.size() == 2);
    CHECK(r.log.size() == kN - 2);
    CHECK_THROWS(greedy_discard(bank, f.cohort, KeepSet::none(kN), t));
    CHECK_THROWS(greedy_discard(bank, f.cohort, KeepSet::all(kN), t, {.delta = -1.0}));
  }

  TEST_CASE("per-subject model bank") {
    auto& f = fixture();
    const auto other = train_on(f.cohort, false);
    std::map<std::string, const AsdNet*> per;
    for (std::size_t s = 0; s < f.cohort.size(); ++s) per[f.cohort[s].id] = s % 2 ? &other : &f.model;
    const ModelBank bank(per);
    const auto p = masked_probabilities(bank, f.cohort, KeepSet::all(kN));
    CHECK(p[0] == predict_subject(f.model, f.cohort[0].instances()).mean_p_asd);
    CHECK(p[1] == predict_subject(other, f.cohort[1].instances()).mean_p_asd);
    std::map<std::string, const AsdNet*> missing = {{"nobody", &other}};
    CHECK_THROWS(masked_probabilities(ModelBank(missing), f.cohort, KeepSet::all(kN)));
    CHECK_THROWS(masked_probabilities(ModelBank(f.model), f.cohort, KeepSet::all(kN + 1)));
  }

  TEST_CASE("writers") {
    testing::TempDir dir("contrib");
    ContributionTable t{{0.5, 0.9, 0.7}, 0.5, {1, 2, 0}};
    const std::vector<std::string> ids = {"a", "b", "c"};
    write_contribution_csv(dir / "c.csv", t, ids);
    std::ifstream f(dir / "c.csv");
    std::string header, row;
    std::getline(f, header);
    CHECK(header == "image_id,single_auc,positive,rank");
    std::getline(f, row);
    CHECK(row == "a,0.5,false,3");
    std::getline(f, row);
    CHECK(row == "b,0.90000000000000002,true,1");
    CHECK(t.positive_count() == 2);

    const std::vector<CurveEntry> curve = {{0, 0.5}, {2, 0.75}};
    write_curve_csv(dir / "k.csv", curve);
    std::ifstream k(dir / "k.csv");
    std::getline(k, header);
    CHECK(header == "k,auc");

    DiscardResult d{KeepSet({1}, 3), 0.9, {{0, 0.9, 0.9, 2}, {2, 0.9, 0.9, 1}}};
    write_discard_json(dir / "d.json", d, ids);
    std::ifstream dj(dir / "d.json");
    const auto j = nlohmann::json::parse(dj);
    CHECK(j["keep"] == nlohmann::json::array({"b"}));
    CHECK(j["steps"][1]["removed"] == "c");
    CHECK_THROWS(write_discard_json(dir / "e.json", d, std::vector<std::string>{"a"}));
  }
}
