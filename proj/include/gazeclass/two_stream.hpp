#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gazeclass/augment.hpp"
#include "gazeclass/cohort.hpp"
#include "gazeclass/network.hpp"

namespace gazeclass {

enum class BackboneKind { tiny, vgg16_headless };

struct BackboneConfig {
  BackboneKind kind = BackboneKind::tiny;
  std::size_t feature_dim = 64;  // fixed at 4096 for vgg16_headless
};

std::vector<LayerSpec> backbone_layers(const BackboneConfig& config);
Shape backbone_input_shape();

// Tiny backbones are drawn from `seed`; vgg16_headless must be loaded from a
// GZC1 file. Either way every layer is frozen.
Network<float> make_backbone(const BackboneConfig& config, std::uint64_t seed);
Network<float> load_backbone(const BackboneConfig& config, const std::filesystem::path& weights);

enum class Stream { image, hfm };
std::string stream_name(Stream s);

// N x D feature rows, row i belonging to image i of the canonical ordering.
struct FeatureMatrix {
  std::size_t n_images = 0;
  std::size_t dim = 0;
  Stream stream = Stream::image;
  std::vector<float> values;

  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

// One image's 256x256 source planes: three color planes for stimuli, one for
// a fixation map (replicated to three channels at the network input).
using SourcePlanes = std::vector<Grid>;

SourcePlanes image_source(const StimulusImage& image);
SourcePlanes hfm_source(const FixationMap& map);

// 3x224x224 network input for one augmentation variant.
template <typename T>
Tensor<T> variant_input(const SourcePlanes& source, std::size_t variant);

// Thread-safe feature cache with optional on-disk backing
// (<dir>/<16 hex digits>.gzc). Concurrent misses may compute the same entry;
// the first insert wins.
class FeatureCache {
 public:
  explicit FeatureCache(std::optional<std::filesystem::path> dir = std::nullopt);

  std::shared_ptr<const FeatureMatrix> find(std::uint64_t key);
  std::shared_ptr<const FeatureMatrix> insert(std::uint64_t key, FeatureMatrix value);

  std::size_t hits() const { return hits_.load(); }
  std::size_t misses() const { return misses_.load(); }

 private:
  std::optional<std::filesystem::path> dir_;
  std::mutex mutex_;
  std::map<std::uint64_t, std::shared_ptr<const FeatureMatrix>> entries_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

class FeatureExtractor {
 public:
  FeatureExtractor(const Network<float>& backbone, FeatureCache* cache = nullptr);

  // Eval-mode forward of each input; row order equals input order.
  FeatureMatrix extract(std::span<const Tensor<float>> inputs, Stream stream) const;

  // Keyed by (backbone checksum, content hash of the sources, variant).
  std::shared_ptr<const FeatureMatrix> extract_cached(std::span<const SourcePlanes> sources,
                                                      std::size_t variant, Stream stream) const;

  std::uint64_t cache_key(std::span<const SourcePlanes> sources, std::size_t variant,
                          Stream stream) const;
  std::size_t computed() const { return computed_.load(); }
  const Network<float>& backbone() const { return backbone_; }

 private:
  const Network<float>& backbone_;
  FeatureCache* cache_;
  std::uint64_t backbone_hash_;
  mutable std::atomic<std::size_t> computed_{0};
};

struct AsdNetConfig {
  std::size_t n_images = 30;
  std::size_t dim = 64;
  std::size_t hidden = 512;
  double dropout = 0.5;
  bool bias = true;
  Init fusion_init = Init::xavier;
  Init fc_init = Init::gaussian;
  double gaussian_std = 0.01;
  // Per-element (x - mean) / sd of the head input, fitted on the training
  // instances.
  bool standardize = true;
};

// Trainable head: 1x1 conv fusing the two stacked streams, then fc(hidden),
// fc(2), softmax. Output index 0 = TD, 1 = ASD.
struct AsdNet {
  AsdNetConfig config;
  Network<float> net;
  // Empty unless standardized: head input = (stacked - shift) * scale.
  Tensor<float> input_shift;
  Tensor<float> input_scale;

  bool standardized() const { return input_scale.size() > 0; }
};

std::vector<LayerSpec> asdnet_layers(const AsdNetConfig& config);
AsdNet make_asdnet(const AsdNetConfig& config, std::uint64_t seed);

struct Probabilities {
  double p_td = 0.5;
  double p_asd = 0.5;
};

// 2 x N x D head input. Rows whose keep flag is false are zeroed in both
// streams.
template <typename T>
Tensor<T> stack_streams(const FeatureMatrix& image, const FeatureMatrix& hfm,
                        const std::vector<bool>* keep = nullptr);

// Head input for `model`: stacked, standardized, then rows outside keep
// zeroed in both streams.
template <typename T>
Tensor<T> head_input(const AsdNet& model, const FeatureMatrix& image, const FeatureMatrix& hfm,
                     const std::vector<bool>* keep = nullptr);

Probabilities fuse_and_classify(const AsdNet& model, const FeatureMatrix& image,
                                const FeatureMatrix& hfm, Mode mode,
                                std::optional<std::uint64_t> seed = std::nullopt,
                                const std::vector<bool>* keep = nullptr);

struct SubjectInstance {
  std::string subject_id;
  std::size_t variant = 0;
  std::shared_ptr<const FeatureMatrix> image_features;
  std::shared_ptr<const FeatureMatrix> hfm_features;
  Group label = Group::td;
};

// Fits input_shift / input_scale from the given instances. Elements with zero
// spread get scale 0.
void fit_standardizer(AsdNet& model, std::span<const SubjectInstance> instances);

// All ten augmented instances of one subject.
struct SubjectFeatures {
  std::string id;
  Group label = Group::td;
  std::array<std::shared_ptr<const FeatureMatrix>, kVariants> image;
  std::array<std::shared_ptr<const FeatureMatrix>, kVariants> hfm;

  SubjectInstance instance(std::size_t variant) const;
  std::vector<SubjectInstance> instances() const;
};

// Feature matrices for every subject and variant. Image features are shared
// between subjects of the same variant.
std::vector<SubjectFeatures> extract_cohort_features(const CohortDataset& cohort,
                                                     const FeatureExtractor& extractor,
                                                     std::size_t jobs = 1);

struct TrainHyper {
  SgdHyper sgd;
  std::size_t batch = 4;
  std::size_t max_iter = 1000;
  std::size_t eval_interval = 50;  // test accuracy cadence on the curve
};

struct CurvePoint {
  std::size_t iter = 0;
  double loss = 0.0;
  double train_acc = 0.0;  // mini-batch accuracy
  std::optional<double> test_acc;
};

struct TrainResult {
  AsdNet model;
  std::vector<CurvePoint> curve;
};

TrainResult train_asdnet(const AsdNetConfig& config, std::span<const SubjectInstance> train,
                         const TrainHyper& hyper, std::uint64_t seed,
                         std::span<const SubjectInstance> test = {});

// Eval-mode fraction of instances whose argmax equals the label.
double instance_accuracy(const AsdNet& model, std::span<const SubjectInstance> instances);

void save_model(const AsdNet& model, const std::filesystem::path& path);
AsdNet load_model(const std::filesystem::path& path);

}  // namespace gazeclass
