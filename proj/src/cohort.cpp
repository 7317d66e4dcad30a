#include "gazeclass/cohort.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "gazeclass/rng.hpp"

namespace gazeclass {

std::string group_name(Group g) { return g == Group::asd ? "ASD" : "TD"; }

Group parse_group(const std::string& s) {
  if (s == "TD") return Group::td;
  if (s == "ASD") return Group::asd;
  throw FormatError("unknown group label '" + s + "' (expected TD or ASD)");
}

void SynthParams::validate() const {
  if (n_per_group < 1) throw ConfigError("synth: n_per_group must be at least 1");
  if (n_images < 1) throw ConfigError("synth: n_images must be at least 1");
  if (width < 16 || height < 16) throw ConfigError("synth: image must be at least 16x16");
  if (max_objects < 1) throw ConfigError("synth: max_objects must be at least 1");
  for (const double b : {center_bias_td, center_bias_asd}) {
    if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("synth: center bias weights must be in [0, 1]");
  }
  if (object_jitter_px < 0 || center_jitter_px < 0 || sample_jitter_px < 0) {
    throw ConfigError("synth: jitter must be non-negative");
  }
  if (object_jitter_px == 0.0 && center_bias_td == 0.0 && center_bias_asd == 0.0) {
    throw ConfigError("synth: zero object jitter with zero center bias is degenerate");
  }
  if (!(viewing_ms > 0) || !(fixation_ms > 0) || !(sample_rate_hz > 0)) {
    throw ConfigError("synth: viewing_ms, fixation_ms and sample_rate_hz must be positive");
  }
  if (!(object_radius_frac > 0 && object_radius_frac < 0.25)) {
    throw ConfigError("synth: object_radius_frac must be in (0, 0.25)");
  }
  for (const auto i : signal_images) {
    if (i >= n_images) throw ConfigError("synth: signal image index out of range");
  }
}

namespace {

struct Blob {
  double x, y, r;
};

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

StimulusImage render_image(const SynthParams& p, const std::vector<Blob>& blobs, Rng& rng) {
  StimulusImage img{p.width, p.height, std::vector<std::uint8_t>(p.width * p.height * 3)};
  double base[3];
  for (auto& b : base) b = rng.uniform(20.0, 70.0);
  std::vector<std::array<double, 3>> colors;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    colors.push_back({rng.uniform(150, 255), rng.uniform(150, 255), rng.uniform(150, 255)});
  }
  for (std::size_t y = 0; y < p.height; ++y) {
    for (std::size_t x = 0; x < p.width; ++x) {
      double px[3] = {base[0], base[1], base[2]};
      for (std::size_t b = 0; b < blobs.size(); ++b) {
        const double dx = static_cast<double>(x) - blobs[b].x;
        const double dy = static_cast<double>(y) - blobs[b].y;
        const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * blobs[b].r * blobs[b].r));
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - w) + colors[b][c] * w;
      }
      for (int c = 0; c < 3; ++c) {
        const double v = px[c] + rng.uniform(-6.0, 6.0);
        img.rgb[(y * p.width + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return img;
}

}  // namespace

RawCohort synth_gaze(const SynthParams& p) {
  p.validate();
  RawCohort raw;
  raw.width = p.width;
  raw.height = p.height;
  raw.sample_rate_hz = p.sample_rate_hz;

  const double min_dim = static_cast<double>(std::min(p.width, p.height));
  const double radius = p.object_radius_frac * min_dim;
  std::vector<std::vector<Blob>> blobs(p.n_images);
  for (std::size_t i = 0; i < p.n_images; ++i) {
    Rng rng(derive_seed(p.seed, 0x696d67ULL, i));
    const auto n_obj = 1 + rng.below(p.max_objects);
    const double margin = 2.0 * radius;
    for (std::size_t k = 0; k < n_obj; ++k) {
      blobs[i].push_back({rng.uniform(margin, static_cast<double>(p.width) - margin),
                          rng.uniform(margin, static_cast<double>(p.height) - margin), radius});
    }
    raw.image_ids.push_back(numbered("img", i, 3));
    raw.images.push_back(render_image(p, blobs[i], rng));
  }

  const std::size_t n_subjects = 2 * p.n_per_group;
  for (std::size_t s = 0; s < n_subjects; ++s) {
    raw.subjects.push_back({numbered("S", s + 1, 3), s < p.n_per_group ? Group::td : Group::asd});
  }

  std::vector<char> is_signal(p.n_images, p.signal_images.empty() ? 1 : 0);
  for (const auto i : p.signal_images) is_signal[i] = 1;

  const double dt = 1000.0 / p.sample_rate_hz;
  const double cx = (static_cast<double>(p.width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(p.height) - 1.0) / 2.0;
  for (std::size_t s = 0; s < n_subjects; ++s) {
    const auto& subj = raw.subjects[s];
    for (std::size_t i = 0; i < p.n_images; ++i) {
      Rng rng(derive_seed(p.seed, 0x67617a65ULL + s, i));
      const double bias = is_signal[i] ? (subj.label == Group::asd ? p.center_bias_asd : p.center_bias_td)
                                       : p.center_bias_td;
      GazeSeries series{subj.id, raw.image_ids[i], {}};
      double t = 0.0;
      while (t < p.viewing_ms) {
        double fx, fy;
        if (rng.uniform() < bias) {
          fx = rng.normal(cx, p.center_jitter_px);
          fy = rng.normal(cy, p.center_jitter_px);
        } else {
          const auto& b = blobs[i][rng.below(blobs[i].size())];
          fx = rng.normal(b.x, p.object_jitter_px);
          fy = rng.normal(b.y, p.object_jitter_px);
        }
        const double duration = p.fixation_ms * rng.uniform(0.6, 1.4);
        const double end = std::min(t + duration, p.viewing_ms);
        for (; t < end; t += dt) {
          series.samples.push_back(
              {t, rng.normal(fx, p.sample_jitter_px), rng.normal(fy, p.sample_jitter_px)});
        }
      }
      raw.series.push_back(std::move(series));
    }
  }
  return raw;
}

CohortDataset assemble_cohort(const RawCohort& raw, const HfmParams& hfm) {
  if (raw.images.size() != raw.image_ids.size()) throw Error("cohort: image ids and images differ in count");
  std::map<std::pair<std::string, std::string>, const GazeSeries*> index;
  for (const auto& s : raw.series) index[{s.subject_id, s.image_id}] = &s;

  CohortDataset ds;
  ds.image_ids = raw.image_ids;
  ds.images = raw.images;
  bool has_td = false, has_asd = false;
  for (const auto& info : raw.subjects) {
    SubjectRecord rec{info.id, info.label, {}};
    (info.label == Group::td ? has_td : has_asd) = true;
    for (std::size_t i = 0; i < raw.images.size(); ++i) {
      const auto it = index.find({info.id, raw.image_ids[i]});
      if (it == index.end()) {
        throw Error("cohort: subject '" + info.id + "' has no gaze for image '" + raw.image_ids[i] + "'");
      }
      const auto& img = raw.images[i];
      rec.maps.push_back(build_hfm(it->second->samples, img.width, img.height, hfm));
    }
    ds.subjects.push_back(std::move(rec));
  }
  if (!has_td || !has_asd) throw Error("cohort: labels must cover both TD and ASD");
  return ds;
}

CohortDataset synth_cohort(const SynthParams& params, const HfmParams& hfm) {
  return assemble_cohort(synth_gaze(params), hfm);
}

void write_dataset(const std::filesystem::path& dir, const RawCohort& raw) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < raw.images.size(); ++i) {
    write_ppm(dir / "images" / (raw.image_ids[i] + ".ppm"), raw.images[i]);
  }
  {
    std::ofstream f(dir / "gaze.csv", std::ios::trunc);
    if (!f) throw Error("cannot write gaze.csv in '" + dir.string() + "'");
    write_gaze_csv(f, raw.series);
  }
  nlohmann::ordered_json m;
  m["format"] = "gazeclass-dataset";
  m["version"] = 1;
  m["width"] = raw.width;
  m["height"] = raw.height;
  m["sample_rate_hz"] = raw.sample_rate_hz;
  m["images"] = raw.image_ids;
  auto subjects = nlohmann::ordered_json::array();
  for (const auto& s : raw.subjects) subjects.push_back({{"id", s.id}, {"label", group_name(s.label)}});
  m["subjects"] = subjects;
  auto sources = nlohmann::ordered_json::array();
  for (const auto& s : raw.series) {
    sources.push_back({{"subject_id", s.subject_id}, {"image_id", s.image_id}, {"n_samples", s.samples.size()}});
  }
  m["sources"] = sources;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  f << m.dump(2) << "\n";
}

RawCohort read_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error("dataset '" + dir.string() + "' has no manifest.json");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  RawCohort raw;
  try {
    raw.width = m.at("width").get<std::size_t>();
    raw.height = m.at("height").get<std::size_t>();
    raw.sample_rate_hz = m.at("sample_rate_hz").get<double>();
    raw.image_ids = m.at("images").get<std::vector<std::string>>();
    for (const auto& s : m.at("subjects")) {
      raw.subjects.push_back({s.at("id").get<std::string>(), parse_group(s.at("label").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  for (const auto& id : raw.image_ids) {
    auto path = dir / "images" / (id + ".ppm");
    if (!std::filesystem::exists(path)) path = dir / "images" / (id + ".pgm");
    raw.images.push_back(read_stimulus(path));
  }
  raw.series = parse_gaze_csv(dir / "gaze.csv");
  return raw;
}

}  // namespace gazeclass
