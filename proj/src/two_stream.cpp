#include "gazeclass/two_stream.hpp"

#include <algorithm>
#include <cmath>

#include "gazeclass/gzc1.hpp"
#include "gazeclass/hash.hpp"
#include "gazeclass/parallel.hpp"
#include "gazeclass/rng.hpp"

namespace gazeclass {

std::vector<LayerSpec> backbone_layers(const BackboneConfig& config) {
  std::vector<LayerSpec> layers;
  if (config.kind == BackboneKind::tiny) {
    if (config.feature_dim == 0) throw ConfigError("backbone feature_dim must be positive");
    for (int b = 1; b <= 3; ++b) {
      const auto n = std::to_string(b);
      layers.push_back(conv2d("conv" + n, 8, 3, 1, 1));
      layers.push_back(relu("relu" + n));
      layers.push_back(maxpool2d("pool" + n, 2, 2));
    }
    layers.push_back(flatten("flatten"));
    layers.push_back(dense("fc", config.feature_dim));
    for (auto& l : layers) {
      l.bias = false;
      l.init = Init::gaussian;
    }
    return layers;
  }
  if (config.feature_dim != 4096) throw ConfigError("vgg16_headless has a fixed feature_dim of 4096");
  const std::vector<std::pair<std::size_t, int>> blocks = {{64, 2}, {128, 2}, {256, 3}, {512, 3}, {512, 3}};
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (int c = 1; c <= blocks[b].second; ++c) {
      const auto n = std::to_string(b + 1) + "_" + std::to_string(c);
      layers.push_back(conv2d("conv" + n, blocks[b].first, 3, 1, 1));
      layers.push_back(relu("relu" + n));
    }
    layers.push_back(maxpool2d("pool" + std::to_string(b + 1), 2, 2));
  }
  layers.push_back(flatten("flatten"));
  layers.push_back(dense("fc6", 4096));
  layers.push_back(relu("relu6"));
  layers.push_back(dropout("drop6", 0.5));
  layers.push_back(dense("fc7", 4096));
  layers.push_back(relu("relu7"));
  return layers;
}

Shape backbone_input_shape() { return {3, kCropSize, kCropSize}; }

Network<float> make_backbone(const BackboneConfig& config, std::uint64_t seed) {
  if (config.kind != BackboneKind::tiny) {
    throw ConfigError("vgg16_headless weights must be loaded from a GZC1 file");
  }
  auto layers = backbone_layers(config);
  // He-scaled Gaussian so activations keep their scale through the stack.
  Network<float> probe(backbone_input_shape(), layers);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!probe.has_params(i)) continue;
    const auto& w = probe.params(i).weight.shape();
    std::size_t fan = 1;
    for (std::size_t k = 1; k < w.size(); ++k) fan *= w[k];
    layers[i].gaussian_std = std::sqrt(2.0 / static_cast<double>(fan));
  }
  Network<float> net(backbone_input_shape(), std::move(layers));
  net.initialize(seed);
  net.freeze_all();
  return net;
}

Network<float> load_backbone(const BackboneConfig& config, const std::filesystem::path& weights) {
  Network<float> net(backbone_input_shape(), backbone_layers(config));
  import_params(net, read_gzc1(weights));
  net.freeze_all();
  return net;
}

std::string stream_name(Stream s) { return s == Stream::image ? "image" : "hfm"; }

SourcePlanes image_source(const StimulusImage& image) {
  SourcePlanes planes;
  for (std::size_t c = 0; c < 3; ++c) {
    planes.push_back(resize_bilinear(image_plane(image, c), kResizeSize, kResizeSize));
  }
  return planes;
}

SourcePlanes hfm_source(const FixationMap& map) {
  return {resize_bilinear(map.grid, kResizeSize, kResizeSize)};
}

template <typename T>
Tensor<T> variant_input(const SourcePlanes& source, std::size_t variant) {
  if (source.empty()) throw ShapeError("variant_input: no source planes");
  Tensor<T> out(backbone_input_shape());
  const std::size_t plane = kCropSize * kCropSize;
  for (std::size_t c = 0; c < 3; ++c) {
    if (c < source.size()) {
      const auto g = augment_variant(source[c], variant);
      std::transform(g.values.begin(), g.values.end(), out.raw() + c * plane,
                     [](double v) { return static_cast<T>(v); });
    } else {
      std::copy(out.raw() + (c - 1) * plane, out.raw() + c * plane, out.raw() + c * plane);
    }
  }
  return out;
}

template Tensor<float> variant_input(const SourcePlanes&, std::size_t);
template Tensor<double> variant_input(const SourcePlanes&, std::size_t);

// ---------------------------------------------------------------------------

namespace {

WeightSet feature_weights(const FeatureMatrix& m) {
  Tensor<float> t({m.n_images, m.dim}, m.values);
  Tensor<float> stream({1}, std::vector<float>{m.stream == Stream::image ? 0.0f : 1.0f});
  return {{"features", std::move(t)}, {"stream", std::move(stream)}};
}

std::optional<FeatureMatrix> feature_from_weights(const WeightSet& w) {
  const auto* f = find_tensor(w, "features");
  const auto* s = find_tensor(w, "stream");
  if (!f || !s || f->dtype() != DType::f32 || f->shape().size() != 2) return std::nullopt;
  const auto& t = std::get<Tensor<float>>(f->value);
  FeatureMatrix m{t.dim(0), t.dim(1), Stream::image, t.storage()};
  m.stream = std::get<Tensor<float>>(s->value)[0] == 0.0f ? Stream::image : Stream::hfm;
  return m;
}

}  // namespace

FeatureCache::FeatureCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {
  if (dir_) std::filesystem::create_directories(*dir_);
}

std::shared_ptr<const FeatureMatrix> FeatureCache::find(std::uint64_t key) {
  {
    std::lock_guard lock(mutex_);
    if (const auto it = entries_.find(key); it != entries_.end()) {
      ++hits_;
      return it->second;
    }
  }
  if (dir_) {
    const auto path = *dir_ / (to_hex(key) + ".gzc");
    if (std::filesystem::exists(path)) {
      try {
        if (auto m = feature_from_weights(read_gzc1(path))) {
          auto ptr = std::make_shared<const FeatureMatrix>(std::move(*m));
          std::lock_guard lock(mutex_);
          auto [it, inserted] = entries_.emplace(key, ptr);
          ++hits_;
          return it->second;
        }
      } catch (const Error&) {
        // Unreadable entries are recomputed and overwritten.
      }
    }
  }
  ++misses_;
  return nullptr;
}

std::shared_ptr<const FeatureMatrix> FeatureCache::insert(std::uint64_t key, FeatureMatrix value) {
  auto ptr = std::make_shared<const FeatureMatrix>(std::move(value));
  {
    std::lock_guard lock(mutex_);
    auto [it, inserted] = entries_.emplace(key, ptr);
    if (!inserted) return it->second;
  }
  if (dir_) {
    const auto path = *dir_ / (to_hex(key) + ".gzc");
    // Unique temp name per writer; rename is atomic on POSIX.
    const auto tmp = *dir_ / (to_hex(key) + "." + to_hex(reinterpret_cast<std::uintptr_t>(ptr.get())));
    write_gzc1(tmp, feature_weights(*ptr));
    std::filesystem::rename(tmp, path);
  }
  return ptr;
}

FeatureExtractor::FeatureExtractor(const Network<float>& backbone, FeatureCache* cache)
    : backbone_(backbone), cache_(cache), backbone_hash_(backbone.checksum()) {}

FeatureMatrix FeatureExtractor::extract(std::span<const Tensor<float>> inputs, Stream stream) const {
  const std::size_t dim = shape_size(backbone_.output_shape());
  FeatureMatrix m{inputs.size(), dim, stream, std::vector<float>(inputs.size() * dim)};
  ActivationTrace<float> trace;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    forward_into(backbone_, inputs[i], Mode::eval, std::nullopt, trace);
    std::copy(trace.output().raw(), trace.output().raw() + dim, m.values.begin() + i * dim);
  }
  ++computed_;
  return m;
}

std::uint64_t FeatureExtractor::cache_key(std::span<const SourcePlanes> sources, std::size_t variant,
                                          Stream stream) const {
  Fnv1a h;
  h.update_u64(backbone_hash_).update_u64(variant).update_u64(static_cast<std::uint64_t>(stream));
  h.update_u64(sources.size());
  for (const auto& planes : sources) {
    h.update_u64(planes.size());
    for (const auto& g : planes) {
      h.update_u64(g.width).update_u64(g.height);
      h.update(std::span<const double>(g.values));
    }
  }
  return h.digest();
}

std::shared_ptr<const FeatureMatrix> FeatureExtractor::extract_cached(
    std::span<const SourcePlanes> sources, std::size_t variant, Stream stream) const {
  const auto key = cache_key(sources, variant, stream);
  if (cache_) {
    if (auto hit = cache_->find(key)) return hit;
  }
  const std::size_t dim = shape_size(backbone_.output_shape());
  FeatureMatrix m{sources.size(), dim, stream, std::vector<float>(sources.size() * dim)};
  ActivationTrace<float> trace;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    forward_into(backbone_, variant_input<float>(sources[i], variant), Mode::eval, std::nullopt, trace);
    std::copy(trace.output().raw(), trace.output().raw() + dim, m.values.begin() + i * dim);
  }
  ++computed_;
  if (cache_) return cache_->insert(key, std::move(m));
  return std::make_shared<const FeatureMatrix>(std::move(m));
}

// ---------------------------------------------------------------------------

std::vector<LayerSpec> asdnet_layers(const AsdNetConfig& c) {
  if (c.n_images == 0 || c.dim == 0 || c.hidden == 0) throw ConfigError("ASDNet sizes must be positive");
  auto fusion = conv2d("fusion", 1, 1);
  fusion.init = c.fusion_init;
  auto fc1 = dense("fc1", c.hidden);
  auto fc2 = dense("fc2", 2);
  for (auto* l : {&fusion, &fc1, &fc2}) {
    l->bias = c.bias;
    l->gaussian_std = c.gaussian_std;
  }
  fc1.init = fc2.init = c.fc_init;
  return {fusion, relu("fusion_relu"), flatten("flatten"), fc1, relu("fc1_relu"),
          dropout("fc1_drop", c.dropout), fc2, softmax("prob")};
}

AsdNet make_asdnet(const AsdNetConfig& config, std::uint64_t seed) {
  AsdNet m{config, Network<float>({2, config.n_images, config.dim}, asdnet_layers(config)), {}, {}};
  m.net.initialize(seed);
  return m;
}

template <typename T>
Tensor<T> stack_streams(const FeatureMatrix& image, const FeatureMatrix& hfm,
                        const std::vector<bool>* keep) {
  if (image.n_images != hfm.n_images || image.dim != hfm.dim) {
    throw ShapeError("image and HFM feature matrices differ in shape");
  }
  if (keep && keep->size() != image.n_images) throw ShapeError("keep mask length differs from N");
  const std::size_t n = image.n_images, d = image.dim;
  Tensor<T> x({2, n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (keep && !(*keep)[i]) continue;
    std::copy_n(image.values.begin() + i * d, d, x.raw() + i * d);
    std::copy_n(hfm.values.begin() + i * d, d, x.raw() + (n + i) * d);
  }
  return x;
}

template Tensor<float> stack_streams(const FeatureMatrix&, const FeatureMatrix&, const std::vector<bool>*);
template Tensor<double> stack_streams(const FeatureMatrix&, const FeatureMatrix&, const std::vector<bool>*);

template <typename T>
Tensor<T> head_input(const AsdNet& model, const FeatureMatrix& image, const FeatureMatrix& hfm,
                     const std::vector<bool>* keep) {
  if (!model.standardized()) return stack_streams<T>(image, hfm, keep);
  auto x = stack_streams<T>(image, hfm);
  if (x.shape() != model.input_scale.shape()) throw ShapeError("head input does not match the standardizer");
  const float* shift = model.input_shift.raw();
  const float* scale = model.input_scale.raw();
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = (x[k] - static_cast<T>(shift[k])) * static_cast<T>(scale[k]);
  if (keep) {
    if (keep->size() != image.n_images) throw ShapeError("keep mask length differs from N");
    const std::size_t n = image.n_images, d = image.dim;
    for (std::size_t i = 0; i < n; ++i) {
      if ((*keep)[i]) continue;
      std::fill_n(x.raw() + i * d, d, T{0});
      std::fill_n(x.raw() + (n + i) * d, d, T{0});
    }
  }
  return x;
}

template Tensor<float> head_input(const AsdNet&, const FeatureMatrix&, const FeatureMatrix&, const std::vector<bool>*);
template Tensor<double> head_input(const AsdNet&, const FeatureMatrix&, const FeatureMatrix&, const std::vector<bool>*);

void fit_standardizer(AsdNet& model, std::span<const SubjectInstance> instances) {
  if (instances.empty()) throw Error("fit_standardizer: no instances");
  const Shape shape{2, model.config.n_images, model.config.dim};
  std::vector<double> sum(shape_size(shape)), sq(shape_size(shape));
  for (const auto& inst : instances) {
    const auto x = stack_streams<double>(*inst.image_features, *inst.hfm_features);
    if (x.shape() != shape) throw ShapeError("fit_standardizer: instance does not match the ASDNet input");
    for (std::size_t k = 0; k < x.size(); ++k) {
      sum[k] += x[k];
      sq[k] += x[k] * x[k];
    }
  }
  const double n = static_cast<double>(instances.size());
  model.input_shift = Tensor<float>(shape);
  model.input_scale = Tensor<float>(shape);
  for (std::size_t k = 0; k < sum.size(); ++k) {
    const double mean = sum[k] / n;
    const double var = std::max(0.0, sq[k] / n - mean * mean);
    const double sd = std::sqrt(var);
    model.input_shift[k] = static_cast<float>(mean);
    model.input_scale[k] = sd > 1e-12 * std::max(1.0, std::abs(mean)) ? static_cast<float>(1.0 / sd) : 0.0f;
  }
}

Probabilities fuse_and_classify(const AsdNet& model, const FeatureMatrix& image,
                                const FeatureMatrix& hfm, Mode mode,
                                std::optional<std::uint64_t> seed, const std::vector<bool>* keep) {
  if (image.n_images * image.dim != model.config.n_images * model.config.dim ||
      image.n_images != model.config.n_images) {
    throw ShapeError("feature matrices (" + std::to_string(image.n_images) + "x" +
                     std::to_string(image.dim) + ") do not match the ASDNet input (" +
                     std::to_string(model.config.n_images) + "x" + std::to_string(model.config.dim) + ")");
  }
  const auto trace = forward(model.net, head_input<float>(model, image, hfm, keep), mode, seed);
  const auto& p = trace.output();
  return {static_cast<double>(p[0]), static_cast<double>(p[1])};
}

SubjectInstance SubjectFeatures::instance(std::size_t variant) const {
  return {id, variant, image.at(variant), hfm.at(variant), label};
}

std::vector<SubjectInstance> SubjectFeatures::instances() const {
  std::vector<SubjectInstance> out;
  for (std::size_t v = 0; v < kVariants; ++v) out.push_back(instance(v));
  return out;
}

std::vector<SubjectFeatures> extract_cohort_features(const CohortDataset& cohort,
                                                     const FeatureExtractor& extractor,
                                                     std::size_t jobs) {
  std::vector<SourcePlanes> image_sources;
  for (const auto& img : cohort.images) image_sources.push_back(image_source(img));
  std::array<std::shared_ptr<const FeatureMatrix>, kVariants> image_features;
  parallel_for(kVariants, jobs, [&](std::size_t v) {
    image_features[v] = extractor.extract_cached(image_sources, v, Stream::image);
  });

  std::vector<SubjectFeatures> out(cohort.subjects.size());
  parallel_for(cohort.subjects.size(), jobs, [&](std::size_t s) {
    const auto& subj = cohort.subjects[s];
    std::vector<SourcePlanes> sources;
    for (const auto& m : subj.maps) sources.push_back(hfm_source(m));
    auto& f = out[s];
    f.id = subj.id;
    f.label = subj.label;
    f.image = image_features;
    for (std::size_t v = 0; v < kVariants; ++v) f.hfm[v] = extractor.extract_cached(sources, v, Stream::hfm);
  });
  return out;
}

// ---------------------------------------------------------------------------

double instance_accuracy(const AsdNet& model, std::span<const SubjectInstance> instances) {
  if (instances.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& inst : instances) {
    const auto p = fuse_and_classify(model, *inst.image_features, *inst.hfm_features, Mode::eval);
    const int predicted = p.p_asd > p.p_td ? 1 : 0;
    correct += predicted == static_cast<int>(inst.label);
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

TrainResult train_asdnet(const AsdNetConfig& config, std::span<const SubjectInstance> train,
                         const TrainHyper& hyper, std::uint64_t seed,
                         std::span<const SubjectInstance> test) {
  if (train.empty()) throw Error("train_asdnet: empty training set");
  const bool has_td = std::any_of(train.begin(), train.end(), [](const auto& i) { return i.label == Group::td; });
  const bool has_asd = std::any_of(train.begin(), train.end(), [](const auto& i) { return i.label == Group::asd; });
  if (!has_td || !has_asd) throw Error("train_asdnet: training set must contain both classes");
  if (hyper.batch == 0) throw ConfigError("train_asdnet: batch size must be positive");

  TrainResult result{make_asdnet(config, derive_seed(seed, 0x696e6974ULL)), {}};
  if (config.standardize) fit_standardizer(result.model, train);
  auto& net = result.model.net;
  const auto logits_layer = *softmax_layer(net);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffler(derive_seed(seed, 0x73687566ULL));
  shuffler.shuffle(order.begin(), order.end());
  std::size_t cursor = 0;

  SgdState<float> sgd;
  ActivationTrace<float> trace;
  for (std::size_t iter = 0; iter < hyper.max_iter; ++iter) {
    Gradients<float> total;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < hyper.batch; ++b) {
      if (cursor == order.size()) {
        shuffler.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const auto& inst = train[order[cursor++]];
      forward_into(net, head_input<float>(result.model, *inst.image_features, *inst.hfm_features), Mode::train,
                   derive_seed(seed, iter, b), trace);
      const auto label = static_cast<std::size_t>(inst.label);
      const auto loss = loss_softmax_xent(trace.activations[logits_layer], label);
      loss_sum += loss.loss;
      const auto& p = trace.output();
      correct += (p[1] > p[0] ? 1u : 0u) == label;
      total.add(backward(net, trace, loss.grad, {.from_layer = logits_layer}));
    }
    total.scale(1.0f / static_cast<float>(hyper.batch));
    sgd.step(net, total, static_cast<std::int64_t>(iter), hyper.sgd);

    CurvePoint pt{iter, loss_sum / hyper.batch, static_cast<double>(correct) / hyper.batch, std::nullopt};
    if (!std::isfinite(pt.loss)) throw NumericError("train_asdnet: non-finite loss");
    const bool last = iter + 1 == hyper.max_iter;
    if (!test.empty() && hyper.eval_interval > 0 && ((iter + 1) % hyper.eval_interval == 0 || last)) {
      pt.test_acc = instance_accuracy(result.model, test);
    }
    result.curve.push_back(pt);
  }
  return result;
}

void save_model(const AsdNet& model, const std::filesystem::path& path) {
  WeightSet w;
  const auto& c = model.config;
  w.push_back({"asdnet.meta",
               Tensor<double>({5}, std::vector<double>{static_cast<double>(c.n_images), static_cast<double>(c.dim),
                                                      static_cast<double>(c.hidden), c.dropout,
                                                      c.bias ? 1.0 : 0.0})});
  if (model.standardized()) {
    w.push_back({"asdnet.input_shift", model.input_shift});
    w.push_back({"asdnet.input_scale", model.input_scale});
  }
  for (auto& e : export_params(model.net)) w.push_back(std::move(e));
  write_gzc1(path, w);
}

AsdNet load_model(const std::filesystem::path& path) {
  const auto w = read_gzc1(path);
  const auto* meta = find_tensor(w, "asdnet.meta");
  if (!meta || meta->dtype() != DType::f64 || meta->shape() != Shape{5}) {
    throw FormatError(path.string() + ": not an ASDNet model (missing asdnet.meta)");
  }
  const auto& m = std::get<Tensor<double>>(meta->value);
  AsdNetConfig c;
  c.n_images = static_cast<std::size_t>(m[0]);
  c.dim = static_cast<std::size_t>(m[1]);
  c.hidden = static_cast<std::size_t>(m[2]);
  c.dropout = m[3];
  c.bias = m[4] != 0.0;
  AsdNet model{c, Network<float>({2, c.n_images, c.dim}, asdnet_layers(c)), {}, {}};
  import_params(model.net, w);
  const auto* shift = find_tensor(w, "asdnet.input_shift");
  const auto* scale = find_tensor(w, "asdnet.input_scale");
  if (static_cast<bool>(shift) != static_cast<bool>(scale)) {
    throw FormatError(path.string() + ": incomplete input standardizer");
  }
  c.standardize = shift != nullptr;
  model.config.standardize = c.standardize;
  if (shift) {
    const Shape expected{2, c.n_images, c.dim};
    if (shift->dtype() != DType::f32 || scale->dtype() != DType::f32 || shift->shape() != expected ||
        scale->shape() != expected) {
      throw FormatError(path.string() + ": malformed input standardizer");
    }
    model.input_shift = std::get<Tensor<float>>(shift->value);
    model.input_scale = std::get<Tensor<float>>(scale->value);
  }
  return model;
}

}  // namespace gazeclass
