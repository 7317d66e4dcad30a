#include "gazeclass/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <type_traits>

#include "gazeclass/attribution.hpp"
#include "gazeclass/contribution.hpp"
#include "gazeclass/gzc1.hpp"
#include "gazeclass/image_io.hpp"
#include "gazeclass/parallel.hpp"
#include "gazeclass/rng.hpp"
#include "gazeclass/tsne.hpp"

namespace gazeclass {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Pulls known keys out of one JSON object; leftovers are rejected.
class KeyReader {
 public:
  KeyReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config" + (path_.empty() ? "" : " '" + path_ + "'") + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError("config key '" + where(key) + "' must be true or false");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError("config key '" + where(key) + "' must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError("config key '" + where(key) + "' must be a number");
    }
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + where(key) + "' has the wrong type");
    }
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string backbone_kind_name(BackboneKind k) { return k == BackboneKind::tiny ? "tiny" : "vgg16_headless"; }

BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "tiny") return BackboneKind::tiny;
  if (s == "vgg16_headless") return BackboneKind::vgg16_headless;
  throw ConfigError("unknown backbone kind '" + s + "' (expected tiny or vgg16_headless)");
}

std::string init_name(Init i) { return i == Init::xavier ? "xavier" : "gaussian"; }

Init parse_init(const std::string& s) {
  if (s == "xavier") return Init::xavier;
  if (s == "gaussian") return Init::gaussian;
  throw ConfigError("unknown init '" + s + "' (expected xavier or gaussian)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool is_nonempty_dir(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

void prepare_output_dir(const fs::path& dir, bool force, const char* what) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw Error(std::string(what) + ": '" + dir.string() + "' is not a directory");
  if (is_nonempty_dir(dir)) {
    if (!force) throw Error(std::string(what) + ": output directory '" + dir.string() + "' is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

bool path_within(const fs::path& child, const fs::path& parent) {
  const auto c = fs::weakly_canonical(child);
  const auto p = fs::weakly_canonical(parent);
  auto it = c.begin();
  for (const auto& part : p) {
    if (it == c.end() || *it != part) return false;
    ++it;
  }
  return true;
}

std::string fold_name(std::size_t f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fold_%03zu", f);
  return buf;
}

std::string utc_run_name() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << "run-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return s.str();
}

ojson prediction_json(const SubjectPrediction& p) {
  ojson probs = ojson::array();
  for (const auto& q : p.probs) probs.push_back({q.p_td, q.p_asd});
  ojson j;
  j["subject_id"] = p.subject_id;
  j["label"] = group_name(p.label);
  j["n_correct"] = p.n_correct;
  j["classification_score"] = p.classification_score;
  j["mean_p_asd"] = p.mean_p_asd;
  j["correct"] = p.correct();
  j["probs"] = std::move(probs);
  return j;
}

ojson plan_json(const CvPlan& plan) {
  ojson folds = ojson::array();
  for (const auto& f : plan.folds) folds.push_back({{"train", f.train}, {"test", f.test}});
  ojson j;
  j["kind"] = plan.kind;
  j["folds"] = std::move(folds);
  return j;
}

CvPlan plan_from_json(const json& j) {
  CvPlan plan;
  plan.kind = j.at("kind").get<std::string>();
  for (const auto& f : j.at("folds")) {
    plan.folds.push_back({f.at("train").get<std::vector<std::string>>(), f.at("test").get<std::vector<std::string>>()});
  }
  return plan;
}

void write_roc_csv(const fs::path& path, std::span<const RocPoint> roc) {
  std::string s = "threshold,fpr,tpr\n";
  for (const auto& p : roc) s += (std::isinf(p.threshold) ? std::string("inf") : num(p.threshold)) + "," + num(p.fpr) + "," + num(p.tpr) + "\n";
  write_text(path, s);
}

void write_curve(const fs::path& path, std::span<const CurvePoint> curve) {
  std::string s = "iter,loss,train_acc,test_acc\n";
  for (const auto& p : curve) {
    s += std::to_string(p.iter) + "," + num(p.loss) + "," + num(p.train_acc) + "," +
         (p.test_acc ? num(*p.test_acc) : std::string()) + "\n";
  }
  write_text(path, s);
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (dataset.empty()) synth.validate();
  if (!(hfm.sigma_px > 0.0)) throw ConfigError("hfm.sigma_px must be positive");
  if (head.hidden == 0) throw ConfigError("head.hidden must be positive");
  if (!(head.dropout >= 0.0 && head.dropout < 1.0)) throw ConfigError("head.dropout must be in [0, 1)");
  if (!(head.gaussian_std > 0.0)) throw ConfigError("head.gaussian_std must be positive");
  if (!(train.sgd.base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
  if (!(train.sgd.gamma >= 0.0) || !(train.sgd.power >= 0.0)) throw ConfigError("train.gamma and train.power must be non-negative");
  if (!(train.sgd.momentum >= 0.0 && train.sgd.momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  if (train.batch == 0) throw ConfigError("train.batch must be positive");
  if (train.max_iter == 0) throw ConfigError("train.max_iter must be positive");
  if (cv.mode != "loocv" && cv.mode != "kfold") throw ConfigError("cv.mode must be loocv or kfold");
  if (cv.mode == "kfold" && cv.k < 2) throw ConfigError("cv.k must be at least 2");
  if (backbone.config.kind == BackboneKind::vgg16_headless) {
    if (backbone.weights.empty()) throw ConfigError("backbone.weights is required for vgg16_headless");
    if (backbone.config.feature_dim != 4096) throw ConfigError("vgg16_headless has feature_dim 4096");
  }
  if (backbone.config.feature_dim == 0) throw ConfigError("backbone.feature_dim must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.train.sgd.base_lr = 1e-3;
  c.train.max_iter = 400;
  return c;
}

ojson config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["dataset"] = c.dataset;
  const auto& s = c.synth;
  ojson synth;
  synth["n_per_group"] = s.n_per_group;
  synth["n_images"] = s.n_images;
  synth["width"] = s.width;
  synth["height"] = s.height;
  synth["max_objects"] = s.max_objects;
  synth["object_radius_frac"] = s.object_radius_frac;
  synth["center_bias_td"] = s.center_bias_td;
  synth["center_bias_asd"] = s.center_bias_asd;
  synth["object_jitter_px"] = s.object_jitter_px;
  synth["center_jitter_px"] = s.center_jitter_px;
  synth["sample_jitter_px"] = s.sample_jitter_px;
  synth["viewing_ms"] = s.viewing_ms;
  synth["fixation_ms"] = s.fixation_ms;
  synth["sample_rate_hz"] = s.sample_rate_hz;
  synth["signal_images"] = s.signal_images;
  synth["seed"] = s.seed;
  j["synth"] = std::move(synth);
  j["hfm"] = {{"sigma_px", c.hfm.sigma_px}};
  ojson bb;
  bb["kind"] = backbone_kind_name(c.backbone.config.kind);
  bb["feature_dim"] = c.backbone.config.feature_dim;
  bb["seed"] = c.backbone.seed;
  bb["weights"] = c.backbone.weights;
  j["backbone"] = std::move(bb);
  ojson head;
  head["hidden"] = c.head.hidden;
  head["dropout"] = c.head.dropout;
  head["bias"] = c.head.bias;
  head["fusion_init"] = init_name(c.head.fusion_init);
  head["fc_init"] = init_name(c.head.fc_init);
  head["gaussian_std"] = c.head.gaussian_std;
  head["standardize"] = c.head.standardize;
  j["head"] = std::move(head);
  ojson train;
  train["base_lr"] = c.train.sgd.base_lr;
  train["gamma"] = c.train.sgd.gamma;
  train["power"] = c.train.sgd.power;
  train["momentum"] = c.train.sgd.momentum;
  train["batch"] = c.train.batch;
  train["max_iter"] = c.train.max_iter;
  train["eval_interval"] = c.train.eval_interval;
  j["train"] = std::move(train);
  ojson cv;
  cv["mode"] = c.cv.mode;
  cv["k"] = c.cv.k;
  cv["seed"] = c.cv.seed;
  j["cv"] = std::move(cv);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c = default_config();
  KeyReader top(j, "");
  top.get("dataset", c.dataset);
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);
  if (const auto* s = top.sub("synth")) {
    KeyReader r(*s, "synth");
    auto& p = c.synth;
    r.get("n_per_group", p.n_per_group);
    r.get("n_images", p.n_images);
    r.get("width", p.width);
    r.get("height", p.height);
    r.get("max_objects", p.max_objects);
    r.get("object_radius_frac", p.object_radius_frac);
    r.get("center_bias_td", p.center_bias_td);
    r.get("center_bias_asd", p.center_bias_asd);
    r.get("object_jitter_px", p.object_jitter_px);
    r.get("center_jitter_px", p.center_jitter_px);
    r.get("sample_jitter_px", p.sample_jitter_px);
    r.get("viewing_ms", p.viewing_ms);
    r.get("fixation_ms", p.fixation_ms);
    r.get("sample_rate_hz", p.sample_rate_hz);
    r.get("signal_images", p.signal_images);
    r.get("seed", p.seed);
    r.finish();
  }
  if (const auto* h = top.sub("hfm")) {
    KeyReader r(*h, "hfm");
    r.get("sigma_px", c.hfm.sigma_px);
    r.finish();
  }
  if (const auto* b = top.sub("backbone")) {
    KeyReader r(*b, "backbone");
    std::string kind = backbone_kind_name(c.backbone.config.kind);
    r.get("kind", kind);
    c.backbone.config.kind = parse_backbone_kind(kind);
    if (c.backbone.config.kind == BackboneKind::vgg16_headless) c.backbone.config.feature_dim = 4096;
    r.get("feature_dim", c.backbone.config.feature_dim);
    r.get("seed", c.backbone.seed);
    r.get("weights", c.backbone.weights);
    r.finish();
  }
  if (const auto* h = top.sub("head")) {
    KeyReader r(*h, "head");
    r.get("hidden", c.head.hidden);
    r.get("dropout", c.head.dropout);
    r.get("bias", c.head.bias);
    std::string fusion = init_name(c.head.fusion_init), fc = init_name(c.head.fc_init);
    r.get("fusion_init", fusion);
    r.get("fc_init", fc);
    c.head.fusion_init = parse_init(fusion);
    c.head.fc_init = parse_init(fc);
    r.get("gaussian_std", c.head.gaussian_std);
    r.get("standardize", c.head.standardize);
    r.finish();
  }
  if (const auto* t = top.sub("train")) {
    KeyReader r(*t, "train");
    r.get("base_lr", c.train.sgd.base_lr);
    r.get("gamma", c.train.sgd.gamma);
    r.get("power", c.train.sgd.power);
    r.get("momentum", c.train.sgd.momentum);
    r.get("batch", c.train.batch);
    r.get("max_iter", c.train.max_iter);
    r.get("eval_interval", c.train.eval_interval);
    r.finish();
  }
  if (const auto* v = top.sub("cv")) {
    KeyReader r(*v, "cv");
    r.get("mode", c.cv.mode);
    r.get("k", c.cv.k);
    r.get("seed", c.cv.seed);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  try {
    return config_from_json(read_json(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override '" + o + "' has an empty key segment");
      if (!node->is_object()) *node = json::object();
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return j;
}

RawCohort load_raw_cohort(const ExperimentConfig& config) {
  if (!config.dataset.empty()) return read_dataset(config.dataset);
  return synth_gaze(config.synth);
}

namespace {

CohortDataset assemble(const ExperimentConfig& config, const RawCohort& raw) {
  HfmParams hfm = config.hfm;
  hfm.sample_rate_hz = raw.sample_rate_hz;
  return assemble_cohort(raw, hfm);
}

}  // namespace

Network<float> build_backbone(const BackboneSetup& setup) {
  if (setup.config.kind == BackboneKind::vgg16_headless) return load_backbone(setup.config, setup.weights);
  if (!setup.weights.empty()) return load_backbone(setup.config, setup.weights);
  return make_backbone(setup.config, setup.seed);
}

// ---------------------------------------------------------------------------

void cmd_synth(const ExperimentConfig& config, const SynthOptions& options, std::ostream& log) {
  config.synth.validate();
  if (options.out.empty()) throw ConfigError("synth: an output directory is required");
  const auto raw = synth_gaze(config.synth);
  prepare_output_dir(options.out, options.force, "synth");
  write_dataset(options.out, raw);
  log << "wrote " << raw.subjects.size() << " subjects x " << raw.images.size() << " images to "
      << options.out.string() << "\n";
}

void cmd_hfm(const HfmOptions& options, std::ostream& log) {
  if (!(options.sigma_px > 0.0)) throw ConfigError("hfm: sigma must be positive");
  if (options.out.empty()) throw ConfigError("hfm: an output directory is required");
  if (path_within(options.out, options.dataset)) throw Error("hfm: output must not be inside the dataset directory");
  const auto raw = read_dataset(options.dataset);
  const auto cohort = assemble_cohort(raw, {raw.sample_rate_hz, options.sigma_px});
  prepare_output_dir(options.out, options.force, "hfm");
  for (const auto& s : cohort.subjects) {
    fs::create_directories(options.out / s.id);
    for (std::size_t i = 0; i < cohort.image_ids.size(); ++i) {
      save_fixation_map(options.out / s.id / (cohort.image_ids[i] + ".pgm"), s.maps[i], s.id, cohort.image_ids[i],
                        options.sigma_px);
    }
  }
  log << "wrote " << cohort.subjects.size() * cohort.image_ids.size() << " fixation maps to " << options.out.string()
      << "\n";
}

void save_features(const fs::path& path, std::span<const SubjectFeatures> subjects) {
  WeightSet w;
  auto put = [&](const std::string& name, const FeatureMatrix& m) {
    w.push_back({name, Tensor<float>({m.n_images, m.dim}, m.values)});
  };
  if (!subjects.empty()) {
    for (std::size_t v = 0; v < kVariants; ++v) put("image/v" + std::to_string(v), *subjects[0].image[v]);
  }
  for (const auto& s : subjects) {
    for (std::size_t v = 0; v < kVariants; ++v) put("hfm/" + s.id + "/v" + std::to_string(v), *s.hfm[v]);
  }
  write_gzc1(path, w);
}

std::vector<SubjectFeatures> load_features(const fs::path& path, std::span<const SubjectInfo> subjects) {
  const auto w = read_gzc1(path);
  auto get = [&](const std::string& name, Stream stream) {
    const auto* e = find_tensor(w, name);
    if (!e || e->dtype() != DType::f32 || e->shape().size() != 2) {
      throw FormatError(path.string() + ": missing or malformed feature tensor '" + name + "'");
    }
    const auto& t = std::get<Tensor<float>>(e->value);
    auto m = std::make_shared<FeatureMatrix>();
    m->n_images = t.dim(0);
    m->dim = t.dim(1);
    m->stream = stream;
    m->values.assign(t.raw(), t.raw() + t.size());
    return std::shared_ptr<const FeatureMatrix>(std::move(m));
  };
  std::array<std::shared_ptr<const FeatureMatrix>, kVariants> image;
  for (std::size_t v = 0; v < kVariants; ++v) image[v] = get("image/v" + std::to_string(v), Stream::image);
  std::vector<SubjectFeatures> out;
  for (const auto& info : subjects) {
    SubjectFeatures s{info.id, info.label, image, {}};
    for (std::size_t v = 0; v < kVariants; ++v) s.hfm[v] = get("hfm/" + info.id + "/v" + std::to_string(v), Stream::hfm);
    out.push_back(std::move(s));
  }
  return out;
}

RunSummary cmd_run(const ExperimentConfig& config_in, const RunOptions& options, std::ostream& log) {
  config_in.validate();
  ExperimentConfig config = config_in;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  const auto raw = load_raw_cohort(config);
  const auto cohort = assemble(config, raw);
  log << "cohort: " << cohort.subjects.size() << " subjects, " << cohort.n_images() << " images (" << elapsed()
      << " s)\n";

  RunSummary summary;
  summary.run_dir = fs::path(config.output_dir) / (options.run_name.empty() ? utc_run_name() : options.run_name);
  if (fs::exists(summary.run_dir)) throw Error("run directory '" + summary.run_dir.string() + "' already exists");
  const auto& dir = summary.run_dir;
  fs::create_directories(dir / "folds");
  fs::create_directories(dir / "models");
  fs::create_directories(dir / "curves");

  const auto backbone = build_backbone(config.backbone);
  config.head.n_images = cohort.n_images();
  config.head.dim = shape_size(backbone.output_shape());
  auto resolved = config_to_json(config);
  resolved["head"]["n_images"] = config.head.n_images;
  resolved["head"]["dim"] = config.head.dim;
  write_json(dir / "config.json", resolved);
  write_gzc1(dir / "backbone.gzc", export_params(backbone));

  std::optional<fs::path> cache_dir = options.cache_dir;
  if (!cache_dir) {
    if (const char* env = std::getenv("GAZECLASS_CACHE_DIR"); env && *env) cache_dir = fs::path(env);
  }
  if (cache_dir) fs::create_directories(*cache_dir);
  FeatureCache cache(cache_dir);
  FeatureExtractor extractor(backbone, &cache);
  const auto subjects = extract_cohort_features(cohort, extractor, options.jobs);
  summary.cache_hits = cache.hits();
  summary.cache_misses = cache.misses();
  summary.features_computed = extractor.computed();
  log << "features: " << extractor.computed() << " matrices computed, " << cache.hits() << " cache hits ("
      << elapsed() << " s)\n";

  ojson subj = ojson::array();
  for (const auto& s : subjects) subj.push_back({{"id", s.id}, {"label", group_name(s.label)}});
  ojson subjects_json;
  subjects_json["subjects"] = std::move(subj);
  subjects_json["image_ids"] = cohort.image_ids;
  write_json(dir / "subjects.json", subjects_json);
  save_features(dir / "features.gzc", subjects);

  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  const auto plan = config.cv.mode == "loocv" ? make_loocv_plan(ids) : make_kfold_plan(ids, config.cv.k, config.cv.seed);
  validate_plan(plan, ids);
  write_json(dir / "plan.json", plan_json(plan));

  std::map<std::string, const SubjectFeatures*> by_id;
  for (const auto& s : subjects) by_id[s.id] = &s;

  struct FoldOutput {
    TrainResult trained;
    std::vector<SubjectPrediction> predictions;
  };
  std::vector<std::optional<FoldOutput>> folds(plan.folds.size());
  parallel_for(plan.folds.size(), options.jobs, [&](std::size_t f) {
    std::vector<SubjectInstance> train, test;
    for (const auto& id : plan.folds[f].train) {
      for (auto& inst : by_id.at(id)->instances()) train.push_back(std::move(inst));
    }
    for (const auto& id : plan.folds[f].test) {
      for (auto& inst : by_id.at(id)->instances()) test.push_back(std::move(inst));
    }
    FoldOutput out{train_asdnet(config.head, train, config.train, derive_seed(config.seed, 0x666f6c64ULL, f), test), {}};
    for (const auto& id : plan.folds[f].test) {
      const auto inst = by_id.at(id)->instances();
      out.predictions.push_back(predict_subject(out.trained.model, inst));
    }
    folds[f] = std::move(out);
  });
  log << "training: " << plan.folds.size() << " folds (" << elapsed() << " s)\n";

  std::map<std::string, SubjectPrediction> pred_by_id;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto& fo = *folds[f];
    const auto name = fold_name(f);
    save_model(fo.trained.model, dir / "models" / (name + ".gzc"));
    write_curve(dir / "curves" / (name + ".csv"), fo.trained.curve);
    ojson fj;
    fj["fold"] = f;
    fj["test"] = plan.folds[f].test;
    fj["train_size"] = plan.folds[f].train.size();
    fj["final_loss"] = fo.trained.curve.back().loss;
    ojson preds = ojson::array();
    for (const auto& p : fo.predictions) {
      preds.push_back(prediction_json(p));
      pred_by_id[p.subject_id] = p;
    }
    fj["predictions"] = std::move(preds);
    write_json(dir / "folds" / (name + ".json"), fj);
  }

  for (const auto& s : subjects) summary.predictions.push_back(pred_by_id.at(s.id));
  summary.metrics = compute_metrics(summary.predictions);
  const auto& m = summary.metrics;
  ojson mj;
  mj["plan"] = plan.kind;
  mj["n_folds"] = plan.folds.size();
  mj["roc_score"] = "mean_p_asd";
  mj["subject_acc"] = m.subject_acc;
  mj["model_acc"] = m.model_acc;
  mj["sen"] = m.sensitivity;
  mj["spe"] = m.specificity;
  mj["auc"] = m.auc;
  ojson per = ojson::array();
  for (const auto& p : summary.predictions) per.push_back(prediction_json(p));
  mj["per_subject"] = std::move(per);
  write_json(dir / "metrics.json", mj);
  write_roc_csv(dir / "roc.csv", m.roc);

  std::string pcsv = "subject_id,label,classification_score,mean_p_asd,correct\n";
  for (const auto& p : summary.predictions) {
    pcsv += p.subject_id + "," + group_name(p.label) + "," + num(p.classification_score) + "," + num(p.mean_p_asd) +
            "," + (p.correct() ? "true" : "false") + "\n";
  }
  write_text(dir / "predictions.csv", pcsv);
  log << "subject_acc " << m.subject_acc << "  sen " << m.sensitivity << "  spe " << m.specificity << "  model_acc "
      << m.model_acc << "  auc " << m.auc << " (" << elapsed() << " s)\n";
  return summary;
}

// ---------------------------------------------------------------------------

RunArtifacts load_run(const fs::path& run_dir) {
  for (const char* name : {"config.json", "subjects.json", "plan.json", "features.gzc", "backbone.gzc", "metrics.json"}) {
    if (!fs::exists(run_dir / name)) {
      throw Error("run directory '" + run_dir.string() + "' is missing '" + name + "'");
    }
  }
  RunArtifacts a;
  auto cj = read_json(run_dir / "config.json");
  const std::size_t n_images = cj["head"].value("n_images", std::size_t{0});
  const std::size_t dim = cj["head"].value("dim", std::size_t{0});
  cj["head"].erase("n_images");
  cj["head"].erase("dim");
  a.config = config_from_json(cj);
  a.config.head.n_images = n_images;
  a.config.head.dim = dim;
  a.backbone = load_backbone(a.config.backbone.config, run_dir / "backbone.gzc");

  const auto sj = read_json(run_dir / "subjects.json");
  std::vector<SubjectInfo> infos;
  for (const auto& s : sj.at("subjects")) infos.push_back({s.at("id").get<std::string>(), parse_group(s.at("label").get<std::string>())});
  a.image_ids = sj.at("image_ids").get<std::vector<std::string>>();
  a.subjects = load_features(run_dir / "features.gzc", infos);
  a.plan = plan_from_json(read_json(run_dir / "plan.json"));
  for (std::size_t f = 0; f < a.plan.folds.size(); ++f) {
    const auto path = run_dir / "models" / (fold_name(f) + ".gzc");
    if (!fs::exists(path)) throw Error("run directory '" + run_dir.string() + "' is missing 'models/" + fold_name(f) + ".gzc'");
    a.models.push_back(load_model(path));
    for (const auto& id : a.plan.folds[f].test) a.fold_of[id] = f;
  }
  return a;
}

Analysis parse_analysis(const std::string& s) {
  if (s == "lrp") return Analysis::lrp;
  if (s == "contrib") return Analysis::contrib;
  if (s == "tsne") return Analysis::tsne;
  throw ConfigError("unknown analysis '" + s + "' (expected lrp, contrib or tsne)");
}

namespace {

ojson kl_check_json(const KlCheck& c) {
  return {{"passed", c.passed}, {"windows", c.windows}, {"worst_increase", c.worst_increase}};
}

void analyze_tsne(const RunArtifacts& a, const AnalyzeOptions& o, const fs::path& out, std::ostream& log) {
  if (o.fold >= a.models.size()) throw Error("tsne: fold " + std::to_string(o.fold) + " does not exist");
  const auto& model = a.models[o.fold];
  const auto pen = model.net.find_layer("fc1_relu");
  const auto last = model.net.find_layer("fc2");
  if (!pen || !last) throw Error("tsne: model lacks fc1_relu/fc2 layers");
  const std::size_t n = a.subjects.size();
  const std::size_t d_pen = shape_size(model.net.output_shape(*pen));
  const std::size_t d_last = shape_size(model.net.output_shape(*last));
  PointMatrix x_pen(n, d_pen), x_last(n, d_last);
  parallel_for(n, o.jobs, [&](std::size_t s) {
    for (std::size_t v = 0; v < kVariants; ++v) {
      const auto& sf = a.subjects[s];
      const auto t = forward(model.net, head_input<float>(model, *sf.image[v], *sf.hfm[v]), Mode::eval);
      const auto& ap = t.activations[*pen + 1];
      const auto& al = t.activations[*last + 1];
      for (std::size_t k = 0; k < d_pen; ++k) x_pen.row(s)[k] += ap[k] / static_cast<double>(kVariants);
      for (std::size_t k = 0; k < d_last; ++k) x_last.row(s)[k] += al[k] / static_cast<double>(kVariants);
    }
  });
  std::vector<std::string> ids, labels;
  std::vector<int> groups;
  for (const auto& s : a.subjects) {
    ids.push_back(s.id);
    labels.push_back(group_name(s.label));
    groups.push_back(static_cast<int>(s.label));
  }
  TsneOptions opts;
  opts.iterations = o.tsne_iterations;
  opts.perplexity = o.perplexity;
  opts.seed = a.config.seed;
  ojson report;
  report["fold"] = o.fold;
  for (const auto& [name, x] : {std::pair<std::string, const PointMatrix*>{"penultimate", &x_pen}, {"output", &x_last}}) {
    const auto e = tsne(*x, opts);
    write_scatter_csv(out / ("tsne_" + name + ".csv"), e, ids, labels);
    write_kl_csv(out / ("kl_" + name + ".csv"), e);
    ojson r;
    r["input_dim"] = x->dim;
    r["perplexity"] = e.perplexity;
    r["final_kl"] = e.kl.back();
    r["kl_check"] = kl_check_json(kl_trace_check(e));
    r["silhouette_by_label"] = silhouette_score(e.coords, groups);
    report[name] = std::move(r);
    log << "tsne " << name << ": final KL " << e.kl.back() << "\n";
  }
  write_json(out / "report.json", report);
}

void analyze_contrib(const RunArtifacts& a, const AnalyzeOptions& o, const fs::path& out, std::ostream& log) {
  if (o.fold >= a.models.size()) throw Error("contrib: fold " + std::to_string(o.fold) + " does not exist");
  std::map<std::string, const AsdNet*> per;
  for (const auto& [id, f] : a.fold_of) per[id] = &a.models[f];
  const ModelBank bank = o.held_out ? ModelBank(per) : ModelBank(a.models[o.fold]);
  const auto table = single_image_contributions(bank, a.subjects, o.jobs);
  const std::size_t n = table.single_auc.size();
  write_contribution_csv(out / "contribution.csv", table, a.image_ids);
  std::vector<std::size_t> ks(n + 1);
  for (std::size_t k = 0; k <= n; ++k) ks[k] = k;
  const auto curve = topk_auc_curve(table, bank, a.subjects, ks, o.jobs);
  write_curve_csv(out / "topk_curve.csv", curve);
  const auto discard = greedy_discard(bank, a.subjects, KeepSet::all(n), table,
                                      {o.discard_delta, o.discard_min_size, o.jobs});
  write_discard_json(out / "discard.json", discard, a.image_ids);
  ojson s;
  s["models"] = o.held_out ? "held_out" : fold_name(o.fold);
  s["baseline_auc"] = table.baseline_auc;
  s["full_auc"] = curve.back().auc;
  s["positive_count"] = table.positive_count();
  s["n_images"] = n;
  s["top_image"] = a.image_ids[table.ranking[0]];
  s["discard_final_size"] = discard.keep.size();
  s["discard_final_auc"] = discard.auc;
  write_json(out / "summary.json", s);
  log << "contrib: " << table.positive_count() << "/" << n << " images above baseline " << table.baseline_auc
      << "; greedy discard kept " << discard.keep.size() << " at AUC " << discard.auc << "\n";
}

void analyze_lrp(const RunArtifacts& a, const AnalyzeOptions& o, const fs::path& out, std::ostream& log) {
  const auto raw = load_raw_cohort(a.config);
  const auto cohort = assemble(a.config, raw);
  if (cohort.image_ids != a.image_ids) throw Error("lrp: dataset images no longer match the run");
  if (o.variant >= kVariants) throw Error("lrp: variant out of range");
  std::vector<SourcePlanes> image_sources;
  for (const auto& img : cohort.images) image_sources.push_back(image_source(img));
  const auto backbone = a.backbone.cast<double>();
  LrpOptions lopts{o.lrp_epsilon};

  auto run_subject = [&](const SubjectRecord& rec, std::optional<std::size_t> target) {
    const auto it = a.fold_of.find(rec.id);
    if (it == a.fold_of.end()) throw Error("lrp: subject '" + rec.id + "' is not part of the run");
    std::vector<SourcePlanes> hfm_sources;
    for (const auto& m : rec.maps) hfm_sources.push_back(hfm_source(m));
    return lrp_two_stream(backbone, a.models[it->second], image_sources, hfm_sources, o.variant,
                          target.value_or(static_cast<std::size_t>(rec.label)), lopts);
  };
  auto make_mask = [&](const Grid& r) {
    return o.mask_mode == "mass" ? important_mask_by_mass(r, o.mask_mass) : important_mask(r, o.mask_threshold);
  };

  const SubjectRecord* chosen = &cohort.subjects.front();
  if (!o.subject.empty()) {
    const auto it = std::find_if(cohort.subjects.begin(), cohort.subjects.end(),
                                 [&](const SubjectRecord& r) { return r.id == o.subject; });
    if (it == cohort.subjects.end()) throw Error("lrp: unknown subject '" + o.subject + "'");
    chosen = &*it;
  }
  const auto rel = run_subject(*chosen, o.target);
  fs::create_directories(out / "relevance");
  std::string masks = "image_id,stream,total,threshold,threshold_count,threshold_fraction,mass_threshold,mass_count,mass_fraction\n";
  for (const auto* maps : {&rel.image, &rel.hfm}) {
    for (const auto& m : *maps) {
      const auto base = a.image_ids[m.image_index] + "_" + stream_name(m.stream);
      write_grid_csv(out / "relevance" / (base + ".csv"), m.relevance);
      write_relevance_pgms(out / "relevance" / (base + "_pos.pgm"), out / "relevance" / (base + "_neg.pgm"), m.relevance);
      const auto t = important_mask(m.relevance, o.mask_threshold);
      const auto q = important_mask_by_mass(m.relevance, o.mask_mass);
      masks += a.image_ids[m.image_index] + "," + stream_name(m.stream) + "," + num(m.total) + "," + num(t.threshold) +
               "," + std::to_string(t.count()) + "," + num(t.retained_mass_fraction) + "," + num(q.threshold) + "," +
               std::to_string(q.count()) + "," + num(q.retained_mass_fraction) + "\n";
    }
  }
  write_text(out / "masks.csv", masks);

  const bool bias_free = [&] {
    const auto& model = a.models[a.fold_of.at(chosen->id)];
    if (model.standardized()) return false;
    const auto& head = model.net;
    for (std::size_t i = 0; i < head.size(); ++i) {
      if (head.has_params(i) && !head.params(i).bias.empty()) return false;
    }
    return true;
  }();
  const bool accounting_ok = rel.accounting_error() <= 1e-9;
  const bool conservation_ok = !bias_free || rel.conservation_error() <= 1e-3;
  ojson c;
  c["subject_id"] = chosen->id;
  c["variant"] = o.variant;
  c["target"] = o.target.value_or(static_cast<std::size_t>(chosen->label));
  c["epsilon"] = o.lrp_epsilon;
  c["seeded"] = rel.seeded;
  c["input_total"] = rel.input_total;
  c["bias_dropped"] = rel.bias_dropped;
  c["epsilon_absorbed"] = rel.epsilon_absorbed;
  c["conservation_error"] = rel.conservation_error();
  c["accounting_error"] = rel.accounting_error();
  c["bias_free"] = bias_free;
  c["pass"] = accounting_ok && conservation_ok;
  write_json(out / "conservation.json", c);
  log << "lrp " << chosen->id << ": seeded " << rel.seeded << ", input " << rel.input_total << ", bias "
      << rel.bias_dropped << " -> " << (accounting_ok && conservation_ok ? "PASS" : "FAIL") << "\n";

  if (o.annotations.empty()) return;
  const auto regions = read_annotations(o.annotations);
  std::map<std::string, std::size_t> image_index;
  for (std::size_t i = 0; i < a.image_ids.size(); ++i) image_index[a.image_ids[i]] = i;
  std::vector<std::string> rows(cohort.subjects.size());
  std::vector<std::map<std::string, std::pair<double, std::size_t>>> sums(cohort.subjects.size());
  parallel_for(cohort.subjects.size(), o.jobs, [&](std::size_t s) {
    const auto& rec = cohort.subjects[s];
    const auto r = &rec == chosen && !o.target ? rel : run_subject(rec, std::nullopt);
    for (const auto& region : regions) {
      const auto it = image_index.find(region.image_id);
      if (it == image_index.end()) throw Error("annotation refers to unknown image '" + region.image_id + "'");
      const double score = feature_score(make_mask(r.image[it->second].relevance), region);
      rows[s] += rec.id + "," + group_name(rec.label) + "," + region.image_id + "," + region.feature_type + "," +
                 num(score) + "\n";
      auto& acc = sums[s][region.feature_type];
      acc.first += score;
      acc.second += 1;
    }
  });
  std::string csv = "subject_id,label,image_id,feature_type,score\n";
  for (const auto& r : rows) csv += r;
  write_text(out / "feature_scores.csv", csv);

  std::string tests = "feature_type,n_td,n_asd,u,z,p\n";
  for (const auto& type : feature_types()) {
    std::vector<double> td, asd;
    for (std::size_t s = 0; s < cohort.subjects.size(); ++s) {
      const auto it = sums[s].find(type);
      if (it == sums[s].end()) continue;
      (cohort.subjects[s].label == Group::td ? td : asd).push_back(it->second.first / static_cast<double>(it->second.second));
    }
    if (td.size() < 3 || asd.size() < 3) continue;
    const auto t = ranksum_test(td, asd);
    tests += type + "," + std::to_string(td.size()) + "," + std::to_string(asd.size()) + "," + num(t.u) + "," + num(t.z) +
             "," + num(t.p) + "\n";
  }
  write_text(out / "ranksum.csv", tests);
}

}  // namespace

fs::path cmd_analyze(const AnalyzeOptions& options, std::ostream& log) {
  const auto artifacts = load_run(options.run_dir);
  const char* name = options.which == Analysis::lrp ? "lrp" : options.which == Analysis::contrib ? "contrib" : "tsne";
  const auto out = options.run_dir / "analysis" / name;
  prepare_output_dir(out, options.force, "analyze");
  switch (options.which) {
    case Analysis::tsne:
      analyze_tsne(artifacts, options, out, log);
      break;
    case Analysis::contrib:
      analyze_contrib(artifacts, options, out, log);
      break;
    case Analysis::lrp:
      analyze_lrp(artifacts, options, out, log);
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<VerifyCheck> cmd_verify(std::uint64_t seed, std::ostream& log) {
  std::vector<VerifyCheck> checks;
  auto record = [&](std::string name, bool ok, std::string detail) {
    log << (ok ? "PASS " : "FAIL ") << name << ": " << detail << "\n";
    checks.push_back({std::move(name), ok, std::move(detail)});
  };

  {
    Network<double> net({2, 6, 6}, {conv2d("conv", 3, 3, 1, 1), relu("relu"), maxpool2d("pool", 2, 2),
                                     flatten("flat"), dense("fc1", 5), relu("relu1"), dropout("drop", 0.3),
                                     dense("fc2", 3), softmax("prob")});
    net.initialize(seed);
    Rng rng(derive_seed(seed, 1));
    Tensor<double> x({2, 6, 6});
    for (auto& v : x.data()) v = rng.normal();
    GradCheckOptions opts;
    opts.mode = Mode::train;
    opts.seed = derive_seed(seed, 2);
    const auto r = grad_check(net, x, 1, opts);
    record("gradient", r.passed(), "max relative error " + num(r.max_rel_error));
  }

  {
    BackboneConfig bc{BackboneKind::tiny, 8};
    const auto backbone = make_backbone(bc, seed).cast<double>();
    Rng rng(derive_seed(seed, 3));
    std::vector<SourcePlanes> img(2), hfm(2);
    for (std::size_t i = 0; i < 2; ++i) {
      for (int c = 0; c < 3; ++c) {
        Grid g(kResizeSize, kResizeSize);
        for (auto& v : g.values) v = rng.uniform();
        img[i].push_back(std::move(g));
      }
      Grid g(kResizeSize, kResizeSize);
      for (auto& v : g.values) v = rng.uniform();
      hfm[i].push_back(std::move(g));
    }
    for (const bool bias : {false, true}) {
      AsdNetConfig hc;
      hc.n_images = 2;
      hc.dim = 8;
      hc.hidden = 16;
      hc.bias = bias;
      // Unit-scale activations; with N(0, 0.01) weights the logits are so
      // small that the epsilon stabilizer absorbs a visible share.
      hc.fc_init = Init::xavier;
      auto head = make_asdnet(hc, seed).net.cast<double>();
      if (bias) {
        for (std::size_t i = 0; i < head.size(); ++i) {
          if (!head.has_params(i)) continue;
          for (auto& b : head.params(i).bias.data()) b = 0.05 * rng.normal();
        }
      }
      const auto r = lrp_two_stream(backbone, head, img, hfm, 3, 1);
      if (bias) {
        record("lrp_accounting", r.accounting_error() <= 1e-9, "accounting error " + num(r.accounting_error()));
      } else {
        record("lrp_conservation", r.conservation_error() <= 1e-3, "relative error " + num(r.conservation_error()));
      }
    }
  }

  {
    Rng rng(derive_seed(seed, 4));
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 4 + rng.below(30);
      std::vector<double> s(n);
      std::vector<bool> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = static_cast<double>(rng.below(8)) / 8.0;
        y[i] = i % 2 == 0 ? true : rng.uniform() < 0.5;
      }
      y[1] = false;
      double pairs = 0.0, credit = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (!y[i] || y[j]) continue;
          pairs += 1.0;
          credit += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
      }
      worst = std::max(worst, std::abs(roc_auc(s, y).auc - credit / pairs));
    }
    record("auc_pair_counting", worst <= 1e-12, "max deviation " + num(worst));
  }

  {
    Rng rng(derive_seed(seed, 5));
    PointMatrix x(5, 3), y(5, 2);
    for (auto& v : x.values) v = rng.normal();
    for (auto& v : y.values) v = rng.normal();
    const auto aff = joint_affinities(x, 1.2);
    const auto g = kl_gradient(aff.p, y);
    double worst = 0.0;
    for (std::size_t k = 0; k < y.values.size(); ++k) {
      auto up = y, down = y;
      up.values[k] += 1e-5;
      down.values[k] -= 1e-5;
      const double fd = (kl_divergence(aff.p, up) - kl_divergence(aff.p, down)) / 2e-5;
      worst = std::max(worst, relative_error(g.values[k], fd));
    }
    record("tsne_gradient", worst < 1e-4, "max relative error " + num(worst));
  }
  return checks;
}

}  // namespace gazeclass
