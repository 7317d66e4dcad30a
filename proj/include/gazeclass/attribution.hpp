#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gazeclass/grid.hpp"
#include "gazeclass/network.hpp"
#include "gazeclass/two_stream.hpp"

namespace gazeclass {

struct LrpOptions {
  double epsilon = 1e-6;
};

// Relevance at activations[0] plus the mass that left the propagation.
// Conservation: sum(relevance) + bias_dropped + epsilon_absorbed == seeded.
template <typename T>
struct LrpResult {
  Tensor<T> relevance;
  double seeded = 0.0;
  double bias_dropped = 0.0;
  double epsilon_absorbed = 0.0;
};

// Epsilon rule for conv/fc, winner-take-all for max-pool, identity through
// ReLU, flatten and (eval-mode) dropout. `relevance` is given w.r.t.
// trace.activations[from_layer].
template <typename T>
LrpResult<T> lrp_propagate(const Network<T>& net, const ActivationTrace<T>& trace, Tensor<T> relevance,
                           std::size_t from_layer, const LrpOptions& options = {});

// Seeds the pre-softmax logit of target_class and propagates to the input.
template <typename T>
LrpResult<T> lrp(const Network<T>& net, const ActivationTrace<T>& trace, std::size_t target_class,
                 const LrpOptions& options = {});

struct RelevanceMap {
  Stream stream = Stream::image;
  std::size_t image_index = 0;
  Grid relevance;  // channel-summed, network input resolution
  double total = 0.0;
};

struct TwoStreamRelevance {
  std::vector<RelevanceMap> image;
  std::vector<RelevanceMap> hfm;
  double seeded = 0.0;
  double bias_dropped = 0.0;
  double epsilon_absorbed = 0.0;
  double input_total = 0.0;  // summed over both streams

  // |input_total + dropped - seeded| relative to |seeded|.
  double accounting_error() const;
  // |input_total - seeded| relative to |seeded|.
  double conservation_error() const;
};

// Full two-stream relevance: head logit -> head input -> each backbone -> pixels.
TwoStreamRelevance lrp_two_stream(const Network<double>& backbone, const Network<double>& head,
                                  std::span<const SourcePlanes> image_sources,
                                  std::span<const SourcePlanes> hfm_sources, std::size_t variant,
                                  std::size_t target_class, const LrpOptions& options = {});

// Same, through a trained ASDNet including its input standardizer: the
// elementwise affine step uses the epsilon rule with the shift as bias.
TwoStreamRelevance lrp_two_stream(const Network<double>& backbone, const AsdNet& model,
                                  std::span<const SourcePlanes> image_sources,
                                  std::span<const SourcePlanes> hfm_sources, std::size_t variant,
                                  std::size_t target_class, const LrpOptions& options = {});

struct ImportanceMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> mask;
  double threshold = 0.0;
  bool inclusive = false;  // |r| >= threshold instead of |r| > threshold
  double retained_mass_fraction = 0.0;

  std::size_t count() const;
};

ImportanceMask important_mask(const Grid& relevance, double threshold);

// Threshold = the |r| value at which the descending cumulative |r| first
// reaches q of the total; pixels with |r| >= threshold are kept.
ImportanceMask important_mask_by_mass(const Grid& relevance, double q);

Grid masked_overlay(const Grid& relevance, const ImportanceMask& mask);

// Feature categories for annotated regions.
inline const std::vector<std::string>& feature_types() {
  static const std::vector<std::string> types = {
      "human_face", "arm_hand",      "upper_body", "lower_body", "lower_limb_foot", "attended_object",
      "animal_face", "animal_body",  "cup",        "fruit",      "food",            "background"};
  return types;
}

// Pixel set as row-major (start, length) runs.
struct RegionAnnotation {
  std::string image_id;
  std::string feature_type;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::pair<std::size_t, std::size_t>> runs;

  void validate() const;
  std::vector<std::uint8_t> bitmap() const;
};

std::vector<RegionAnnotation> read_annotations(const std::filesystem::path& path);

// Fraction of the region's pixels that are inside the importance mask.
double feature_score(const ImportanceMask& mask, const RegionAnnotation& region);

struct RankSumResult {
  double u = 0.0;  // Mann-Whitney U of the first group
  double z = 0.0;
  double p = 1.0;  // two-sided, normal approximation, tie and continuity corrected
};

RankSumResult ranksum_test(std::span<const double> a, std::span<const double> b);

// Diverging 8-bit export: positive and negative parts scaled by max |r|.
void write_relevance_pgms(const std::filesystem::path& pos_path, const std::filesystem::path& neg_path,
                          const Grid& relevance);
void write_grid_csv(const std::filesystem::path& path, const Grid& grid);

}  // namespace gazeclass
