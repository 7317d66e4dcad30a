#include "gazeclass/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "json.hpp"

#include "gazeclass/image_io.hpp"

namespace gazeclass {

template <typename T>
LrpResult<T> lrp_propagate(const Network<T>& net, const ActivationTrace<T>& trace, Tensor<T> relevance,
                           std::size_t from_layer, const LrpOptions& options) {
  if (trace.mode != Mode::eval) throw Error("lrp: trace must come from an eval-mode forward pass");
  if (trace.activations.size() != net.size() + 1) throw ShapeError("lrp: trace was not produced by this network");
  if (from_layer > net.size()) throw ShapeError("lrp: from_layer out of range");
  if (relevance.shape() != trace.activations[from_layer].shape()) throw ShapeError("lrp: relevance shape mismatch");

  LrpResult<T> out;
  out.seeded = static_cast<double>(relevance.sum());
  const T eps = static_cast<T>(options.epsilon);
  for (std::size_t i = from_layer; i-- > 0;) {
    const auto& spec = net.layer(i);
    const auto& x = trace.activations[i];
    const auto& z = trace.activations[i + 1];
    if (std::holds_alternative<Conv2d>(spec.kind) || std::holds_alternative<Dense>(spec.kind)) {
      Tensor<T> s(z.shape());
      const auto& bias = net.params(i).bias;
      const std::size_t per_channel =
          std::holds_alternative<Conv2d>(spec.kind) ? z.size() / z.dim(0) : 1;
      double dropped_b = 0.0, dropped_e = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) {
        const T stab = z[k] >= T{0} ? eps : -eps;
        s[k] = relevance[k] / (z[k] + stab);
        if (!bias.empty()) dropped_b += static_cast<double>(bias[k / per_channel] * s[k]);
        dropped_e += static_cast<double>(stab * s[k]);
      }
      out.bias_dropped += dropped_b;
      out.epsilon_absorbed += dropped_e;
      Tensor<T> c = linear_input_vjp(net, trace, i, s);
      for (std::size_t j = 0; j < c.size(); ++j) c[j] *= x[j];
      relevance = std::move(c);
    } else if (std::holds_alternative<MaxPool2d>(spec.kind)) {
      Tensor<T> r(x.shape());
      const auto& am = trace.argmax[i];
      for (std::size_t k = 0; k < relevance.size(); ++k) r[am[k]] += relevance[k];
      relevance = std::move(r);
    } else if (std::holds_alternative<Softmax>(spec.kind)) {
      throw Error("lrp: cannot propagate through softmax; seed at the logits");
    } else {
      relevance = relevance.reshaped(x.shape());
    }
  }
  out.relevance = std::move(relevance);
  return out;
}

template <typename T>
LrpResult<T> lrp(const Network<T>& net, const ActivationTrace<T>& trace, std::size_t target_class,
                 const LrpOptions& options) {
  const auto logits_layer = softmax_layer(net).value_or(net.size());
  const auto& logits = trace.activations.at(logits_layer);
  if (target_class >= logits.size()) throw Error("lrp: target class out of range");
  Tensor<T> seed(logits.shape());
  seed[target_class] = logits[target_class];
  return lrp_propagate(net, trace, std::move(seed), logits_layer, options);
}

template struct LrpResult<float>;
template struct LrpResult<double>;
template LrpResult<float> lrp_propagate(const Network<float>&, const ActivationTrace<float>&, Tensor<float>,
                                        std::size_t, const LrpOptions&);
template LrpResult<double> lrp_propagate(const Network<double>&, const ActivationTrace<double>&, Tensor<double>,
                                         std::size_t, const LrpOptions&);
template LrpResult<float> lrp(const Network<float>&, const ActivationTrace<float>&, std::size_t, const LrpOptions&);
template LrpResult<double> lrp(const Network<double>&, const ActivationTrace<double>&, std::size_t,
                               const LrpOptions&);

double TwoStreamRelevance::accounting_error() const {
  return std::abs(input_total + bias_dropped + epsilon_absorbed - seeded) / std::max(std::abs(seeded), 1e-300);
}

double TwoStreamRelevance::conservation_error() const {
  return std::abs(input_total - seeded) / std::max(std::abs(seeded), 1e-300);
}

namespace {

TwoStreamRelevance two_stream_impl(const Network<double>& backbone, const Network<double>& head,
                                   const Tensor<float>* shift, const Tensor<float>* scale,
                                   std::span<const SourcePlanes> image_sources,
                                   std::span<const SourcePlanes> hfm_sources, std::size_t variant,
                                   std::size_t target_class, const LrpOptions& options) {
  const std::size_t n = image_sources.size();
  if (hfm_sources.size() != n) throw ShapeError("lrp_two_stream: stream sizes differ");
  const std::size_t d = shape_size(backbone.output_shape());
  if (head.input_shape() != Shape{2, n, d}) throw ShapeError("lrp_two_stream: head input does not match N x D");

  Tensor<double> head_in({2, n, d});
  for (std::size_t s = 0; s < 2; ++s) {
    const auto sources = s == 0 ? image_sources : hfm_sources;
    for (std::size_t i = 0; i < n; ++i) {
      const auto t = forward(backbone, variant_input<double>(sources[i], variant), Mode::eval);
      std::copy(t.output().raw(), t.output().raw() + d, head_in.raw() + (s * n + i) * d);
    }
  }
  Tensor<double> z = head_in;
  if (scale) {
    if (scale->shape() != z.shape()) throw ShapeError("lrp_two_stream: standardizer shape mismatch");
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = (z[k] - static_cast<double>((*shift)[k])) * static_cast<double>((*scale)[k]);
    }
  }
  const auto head_trace = forward(head, z, Mode::eval);
  auto head_lrp = lrp(head, head_trace, target_class, options);

  TwoStreamRelevance out;
  out.seeded = head_lrp.seeded;
  out.bias_dropped = head_lrp.bias_dropped;
  out.epsilon_absorbed = head_lrp.epsilon_absorbed;
  if (scale) {
    // z = s * x - s * mu: epsilon rule on an elementwise affine map.
    auto& r = head_lrp.relevance;
    for (std::size_t k = 0; k < r.size(); ++k) {
      const double stab = z[k] >= 0.0 ? options.epsilon : -options.epsilon;
      const double sk = r[k] / (z[k] + stab);
      const double s_k = static_cast<double>((*scale)[k]);
      out.bias_dropped += -s_k * static_cast<double>((*shift)[k]) * sk;
      out.epsilon_absorbed += stab * sk;
      r[k] = head_in[k] * s_k * sk;
    }
  }
  for (std::size_t s = 0; s < 2; ++s) {
    const auto sources = s == 0 ? image_sources : hfm_sources;
    for (std::size_t i = 0; i < n; ++i) {
      const auto t = forward(backbone, variant_input<double>(sources[i], variant), Mode::eval);
      Tensor<double> seed(backbone.output_shape());
      std::copy(head_lrp.relevance.raw() + (s * n + i) * d, head_lrp.relevance.raw() + (s * n + i + 1) * d,
                seed.raw());
      const auto r = lrp_propagate(backbone, t, std::move(seed), backbone.size(), options);
      out.bias_dropped += r.bias_dropped;
      out.epsilon_absorbed += r.epsilon_absorbed;
      const auto& rel = r.relevance;
      RelevanceMap map{s == 0 ? Stream::image : Stream::hfm, i, Grid(rel.dim(2), rel.dim(1)), 0.0};
      const std::size_t plane = rel.dim(1) * rel.dim(2);
      for (std::size_t c = 0; c < rel.dim(0); ++c) {
        for (std::size_t p = 0; p < plane; ++p) map.relevance.values[p] += rel[c * plane + p];
      }
      map.total = std::accumulate(map.relevance.values.begin(), map.relevance.values.end(), 0.0);
      out.input_total += map.total;
      (s == 0 ? out.image : out.hfm).push_back(std::move(map));
    }
  }
  return out;
}

}  // namespace

TwoStreamRelevance lrp_two_stream(const Network<double>& backbone, const Network<double>& head,
                                  std::span<const SourcePlanes> image_sources,
                                  std::span<const SourcePlanes> hfm_sources, std::size_t variant,
                                  std::size_t target_class, const LrpOptions& options) {
  return two_stream_impl(backbone, head, nullptr, nullptr, image_sources, hfm_sources, variant, target_class,
                         options);
}

TwoStreamRelevance lrp_two_stream(const Network<double>& backbone, const AsdNet& model,
                                  std::span<const SourcePlanes> image_sources,
                                  std::span<const SourcePlanes> hfm_sources, std::size_t variant,
                                  std::size_t target_class, const LrpOptions& options) {
  const auto head = model.net.cast<double>();
  const bool std_on = model.standardized();
  return two_stream_impl(backbone, head, std_on ? &model.input_shift : nullptr, std_on ? &model.input_scale : nullptr,
                         image_sources, hfm_sources, variant, target_class, options);
}

// ---------------------------------------------------------------------------

std::size_t ImportanceMask::count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

ImportanceMask build_mask(const Grid& r, double threshold, bool inclusive) {
  ImportanceMask m{r.width, r.height, std::vector<std::uint8_t>(r.size()), threshold, inclusive, 0.0};
  double total = 0.0, kept = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double a = std::abs(r.values[i]);
    total += a;
    const bool in = inclusive ? a >= threshold : a > threshold;
    m.mask[i] = in;
    if (in) kept += a;
  }
  m.retained_mass_fraction = total > 0.0 ? kept / total : 0.0;
  return m;
}

}  // namespace

ImportanceMask important_mask(const Grid& relevance, double threshold) {
  if (!(threshold >= 0.0)) throw Error("important_mask: threshold must be non-negative");
  return build_mask(relevance, threshold, false);
}

ImportanceMask important_mask_by_mass(const Grid& relevance, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw Error("important_mask_by_mass: q must be in (0, 1]");
  std::vector<double> mags(relevance.size());
  std::transform(relevance.values.begin(), relevance.values.end(), mags.begin(),
                 [](double v) { return std::abs(v); });
  std::sort(mags.begin(), mags.end(), std::greater<>());
  const double total = std::accumulate(mags.begin(), mags.end(), 0.0);
  if (total == 0.0) return build_mask(relevance, 0.0, false);
  double cum = 0.0, threshold = mags.back();
  for (const double m : mags) {
    cum += m;
    if (cum >= q * total) {
      threshold = m;
      break;
    }
  }
  return build_mask(relevance, threshold, true);
}

Grid masked_overlay(const Grid& relevance, const ImportanceMask& mask) {
  if (relevance.width != mask.width || relevance.height != mask.height) {
    throw ShapeError("masked_overlay: relevance and mask dimensions differ");
  }
  Grid out(relevance.width, relevance.height);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = mask.mask[i] ? relevance.values[i] : 0.0;
  return out;
}

void RegionAnnotation::validate() const {
  if (width == 0 || height == 0) throw Error("annotation '" + image_id + "': dimensions must be positive");
  for (const auto& [start, len] : runs) {
    if (start + len > width * height) {
      throw Error("annotation '" + image_id + "/" + feature_type + "': run outside image bounds");
    }
  }
}

std::vector<std::uint8_t> RegionAnnotation::bitmap() const {
  validate();
  std::vector<std::uint8_t> b(width * height);
  for (const auto& [start, len] : runs) std::fill_n(b.begin() + start, len, std::uint8_t{1});
  return b;
}

std::vector<RegionAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  std::vector<RegionAnnotation> out;
  try {
    const auto j = nlohmann::json::parse(f);
    for (const auto& a : j.at("annotations")) {
      RegionAnnotation r;
      r.image_id = a.at("image_id").get<std::string>();
      r.feature_type = a.at("feature_type").get<std::string>();
      r.width = a.at("width").get<std::size_t>();
      r.height = a.at("height").get<std::size_t>();
      for (const auto& run : a.at("runs")) r.runs.emplace_back(run.at(0).get<std::size_t>(), run.at(1).get<std::size_t>());
      const auto& types = feature_types();
      if (std::find(types.begin(), types.end(), r.feature_type) == types.end()) {
        throw FormatError("unknown feature type '" + r.feature_type + "'");
      }
      r.validate();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

double feature_score(const ImportanceMask& mask, const RegionAnnotation& region) {
  if (region.width != mask.width || region.height != mask.height) {
    throw ShapeError("feature_score: annotation and mask dimensions differ");
  }
  const auto b = region.bitmap();
  std::size_t in_region = 0, hit = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b[i]) continue;
    ++in_region;
    hit += mask.mask[i];
  }
  if (in_region == 0) throw Error("feature_score: empty region");
  return static_cast<double>(hit) / static_cast<double>(in_region);
}

RankSumResult ranksum_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 3 || b.size() < 3) throw Error("ranksum_test: each group needs at least 3 values");
  struct Item {
    double v;
    bool first;
  };
  std::vector<Item> all;
  for (const double v : a) all.push_back({v, true});
  for (const double v : b) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& x, const Item& y) { return x.v < y.v; });

  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
  const double n = n1 + n2;
  double rank_sum = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].first) rank_sum += midrank;
    }
    i = j;
  }
  RankSumResult r;
  r.u = rank_sum - n1 * (n1 + 1.0) / 2.0;
  const double mu = n1 * n2 / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) return r;
  const double dev = std::max(0.0, std::abs(r.u - mu) - 0.5);
  r.z = (r.u >= mu ? 1.0 : -1.0) * dev / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
  return r;
}

void write_relevance_pgms(const std::filesystem::path& pos_path, const std::filesystem::path& neg_path,
                          const Grid& relevance) {
  double peak = 0.0;
  for (const double v : relevance.values) peak = std::max(peak, std::abs(v));
  GrayImage pos{relevance.width, relevance.height, 255, std::vector<std::uint16_t>(relevance.size())};
  GrayImage neg = pos;
  if (peak > 0.0) {
    for (std::size_t i = 0; i < relevance.size(); ++i) {
      const double v = relevance.values[i] / peak;
      pos.values[i] = static_cast<std::uint16_t>(std::lround(255.0 * std::max(v, 0.0)));
      neg.values[i] = static_cast<std::uint16_t>(std::lround(255.0 * std::max(-v, 0.0)));
    }
  }
  write_pgm(pos_path, pos);
  write_pgm(neg_path, neg);
}

void write_grid_csv(const std::filesystem::path& path, const Grid& grid) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  char buf[32];
  for (std::size_t r = 0; r < grid.height; ++r) {
    for (std::size_t c = 0; c < grid.width; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", grid.at(r, c));
      if (c) f << ',';
      f << buf;
    }
    f << '\n';
  }
}

}  // namespace gazeclass
