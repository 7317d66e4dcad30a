#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

#include "gazeclass/gzc1.hpp"
#include "gazeclass/two_stream.hpp"

using namespace gazeclass;

namespace {

FeatureMatrix features(std::size_t n, std::size_t d, Stream s, std::uint64_t seed, double scale = 1.0) {
  FeatureMatrix m{n, d, s, std::vector<float>(n * d)};
  Rng rng(seed);
  for (auto& v : m.values) v = static_cast<float>(scale * rng.normal());
  return m;
}

std::shared_ptr<const FeatureMatrix> share(FeatureMatrix m) { return std::make_shared<const FeatureMatrix>(std::move(m)); }

// Row 0 of both streams carries the label; everything else is noise.
std::vector<SubjectInstance> separable_instances(std::size_t count, std::size_t n, std::size_t d, std::uint64_t seed) {
  std::vector<SubjectInstance> out;
  for (std::size_t s = 0; s < count; ++s) {
    const Group g = s % 2 ? Group::asd : Group::td;
    auto img = features(n, d, Stream::image, derive_seed(seed, s, 1), 0.3);
    auto hfm = features(n, d, Stream::hfm, derive_seed(seed, s, 2), 0.3);
    const float sign = g == Group::asd ? 1.0f : -1.0f;
    for (std::size_t k = 0; k < d; ++k) hfm.values[k] += sign;
    out.push_back({"s" + std::to_string(s), 0, share(std::move(img)), share(std::move(hfm)), g});
  }
  return out;
}

AsdNetConfig small_config(std::size_t n, std::size_t d) {
  AsdNetConfig c;
  c.n_images = n;
  c.dim = d;
  c.hidden = 16;
  return c;
}

// Straightforward loops over the backbone's layer list, in double.
std::vector<double> reference_forward(const Network<float>& net, const Tensor<float>& input) {
  std::vector<double> x(input.data().begin(), input.data().end());
  Shape shape = input.shape();
  for (std::size_t li = 0; li < net.size(); ++li) {
    const auto& kind = net.layer(li).kind;
    if (const auto* c = std::get_if<Conv2d>(&kind)) {
      const auto& w = net.params(li).weight;
      const std::size_t ci = shape[0], h = shape[1], wd = shape[2];
      const std::size_t oh = (h + 2 * c->pad - c->kernel) / c->stride + 1;
      const std::size_t ow = (wd + 2 * c->pad - c->kernel) / c->stride + 1;
      std::vector<double> y(c->out_channels * oh * ow, 0.0);
      for (std::size_t o = 0; o < c->out_channels; ++o)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t q = 0; q < ow; ++q) {
            double acc = net.params(li).bias.empty() ? 0.0 : net.params(li).bias[o];
            for (std::size_t i = 0; i < ci; ++i)
              for (std::size_t a = 0; a < c->kernel; ++a)
                for (std::size_t b = 0; b < c->kernel; ++b) {
                  const long yy = long(r * c->stride + a) - long(c->pad);
                  const long xx = long(q * c->stride + b) - long(c->pad);
                  if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
                  acc += double(w[((o * ci + i) * c->kernel + a) * c->kernel + b]) * x[(i * h + yy) * wd + xx];
                }
            y[(o * oh + r) * ow + q] = acc;
          }
      x = std::move(y);
      shape = {c->out_channels, oh, ow};
    } else if (const auto* p = std::get_if<MaxPool2d>(&kind)) {
      const std::size_t ch = shape[0], h = shape[1], wd = shape[2];
      const std::size_t oh = (h - p->kernel) / p->stride + 1, ow = (wd - p->kernel) / p->stride + 1;
      std::vector<double> y(ch * oh * ow, -1e300);
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t q = 0; q < ow; ++q)
            for (std::size_t a = 0; a < p->kernel; ++a)
              for (std::size_t b = 0; b < p->kernel; ++b)
                y[(c * oh + r) * ow + q] =
                    std::max(y[(c * oh + r) * ow + q], x[(c * h + r * p->stride + a) * wd + q * p->stride + b]);
      x = std::move(y);
      shape = {ch, oh, ow};
    } else if (std::holds_alternative<Relu>(kind)) {
      for (auto& v : x) v = std::max(v, 0.0);
    } else if (const auto* d = std::get_if<Dense>(&kind)) {
      const auto& w = net.params(li).weight;
      std::vector<double> y(d->out_dim, 0.0);
      for (std::size_t o = 0; o < d->out_dim; ++o) {
        double acc = net.params(li).bias.empty() ? 0.0 : net.params(li).bias[o];
        for (std::size_t j = 0; j < x.size(); ++j) acc += double(w[o * x.size() + j]) * x[j];
        y[o] = acc;
      }
      x = std::move(y);
      shape = {d->out_dim};
    }
  }
  return x;
}

}  // namespace

TEST_SUITE("two_stream_net") {
  TEST_CASE("tiny backbone layout and frozen contract") {
    const auto bb = make_backbone({BackboneKind::tiny, 16}, 7);
    CHECK(bb.output_shape() == Shape{16});
    for (std::size_t i = 0; i < bb.size(); ++i) CHECK(bb.frozen(i));
    CHECK(make_backbone({BackboneKind::tiny, 16}, 7).checksum() == bb.checksum());
    CHECK(make_backbone({BackboneKind::tiny, 16}, 8).checksum() != bb.checksum());
    CHECK_THROWS_AS(make_backbone({BackboneKind::vgg16_headless, 4096}, 1), ConfigError);
    CHECK_THROWS_AS(backbone_layers({BackboneKind::vgg16_headless, 64}), ConfigError);
  }

  TEST_CASE("backbone features match a manual layer-by-layer evaluation") {
    auto bb = make_backbone({BackboneKind::tiny, 8}, 3);
    // Hand-set weights: a repeating signed ramp in every parameter tensor.
    for (std::size_t i = 0; i < bb.size(); ++i) {
      if (!bb.has_params(i)) continue;
      auto& w = bb.params(i).weight;
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = float(int((k * 7) % 11) - 5) * 0.02f;
    }
    Grid plane(256, 256);
    for (std::size_t r = 0; r < 256; ++r)
      for (std::size_t c = 0; c < 256; ++c) plane.at(r, c) = std::sin(0.05 * r) * std::cos(0.03 * c) + 0.5;
    const SourcePlanes src = {plane};
    const auto input = variant_input<float>(src, 2);
    FeatureExtractor ex(bb);
    const std::vector<Tensor<float>> inputs = {input};
    const auto m = ex.extract(inputs, Stream::hfm);
    REQUIRE(m.n_images == 1);
    REQUIRE(m.dim == 8);
    const auto ref = reference_forward(bb, input);
    for (std::size_t k = 0; k < 8; ++k) CHECK(m.values[k] == doctest::Approx(ref[k]).epsilon(1e-4));
  }

  TEST_CASE("feature extraction is deterministic and row-ordered") {
    const auto bb = make_backbone({BackboneKind::tiny, 12}, 5);
    FeatureExtractor ex(bb);
    Grid a(256, 256, 0.2), b(256, 256, 0.9);
    const auto ia = variant_input<float>(SourcePlanes{a}, 0);
    const auto ib = variant_input<float>(SourcePlanes{b}, 0);
    const std::vector<Tensor<float>> inputs = {ia, ib, ia};
    const auto m = ex.extract(inputs, Stream::image);
    CHECK(std::equal(m.row(0).begin(), m.row(0).end(), m.row(2).begin()));
    const std::vector<Tensor<float>> single = {ib};
    const auto mb = ex.extract(single, Stream::image);
    CHECK(std::equal(m.row(1).begin(), m.row(1).end(), mb.row(0).begin()));
  }

  TEST_CASE("feature cache contract") {
    testing::TempDir dir("cache");
    const auto bb = make_backbone({BackboneKind::tiny, 8}, 5);
    std::vector<SourcePlanes> sources = {{Grid(256, 256, 0.1)}, {Grid(256, 256, 0.6)}};
    FeatureCache cache(dir.path());
    FeatureExtractor ex(bb, &cache);
    const auto first = ex.extract_cached(sources, 4, Stream::hfm);
    CHECK(ex.computed() == 1);
    CHECK(cache.misses() == 1);
    const auto second = ex.extract_cached(sources, 4, Stream::hfm);
    CHECK(ex.computed() == 1);
    CHECK(cache.hits() == 1);
    CHECK(*first == *second);

    FeatureCache disk(dir.path());
    FeatureExtractor ex2(bb, &disk);
    const auto third = ex2.extract_cached(sources, 4, Stream::hfm);
    CHECK(ex2.computed() == 0);
    CHECK(disk.hits() == 1);
    CHECK(*third == *first);

    CHECK(ex.cache_key(sources, 4, Stream::hfm) != ex.cache_key(sources, 5, Stream::hfm));
    CHECK(ex.cache_key(sources, 4, Stream::hfm) != ex.cache_key(sources, 4, Stream::image));
    const auto key = ex.cache_key(sources, 4, Stream::hfm);
    sources[1][0].at(128, 128) = 0.61;
    CHECK(ex.cache_key(sources, 4, Stream::hfm) != key);
    const auto changed = ex.extract_cached(sources, 4, Stream::hfm);
    CHECK(ex.computed() == 2);
    CHECK_FALSE(*changed == *first);
    const auto other_bb = make_backbone({BackboneKind::tiny, 8}, 6);
    FeatureExtractor ex3(other_bb, &cache);
    CHECK(ex3.cache_key(sources, 4, Stream::hfm) != ex.cache_key(sources, 4, Stream::hfm));
  }

  TEST_CASE("hand-traceable head on a 1x1 feature fixture") {
    AsdNetConfig c = small_config(1, 1);
    c.hidden = 2;
    c.standardize = false;
    auto m = make_asdnet(c, 1);
    auto& net = m.net;
    net.params(0).weight = Tensor<float>({1, 2, 1, 1}, std::vector<float>{1.0f, 0.0f});
    net.params(0).bias.fill(0.0f);
    net.params(3).weight = Tensor<float>({2, 1}, std::vector<float>{1.0f, -1.0f});
    net.params(3).bias.fill(0.0f);
    net.params(6).weight = Tensor<float>({2, 2}, std::vector<float>{1.0f, 0.0f, 0.0f, 1.0f});
    net.params(6).bias = Tensor<float>({2}, std::vector<float>{0.0f, 0.2f});
    const FeatureMatrix img{1, 1, Stream::image, {0.7f}}, hfm{1, 1, Stream::hfm, {0.3f}};
    // fusion relu(0.7) -> fc1 (0.7, -0.7) -> relu (0.7, 0) -> logits (0.7, 0.2)
    const auto p = fuse_and_classify(m, img, hfm, Mode::eval);
    const double e = std::exp(0.7 - 0.2);
    CHECK(p.p_td == doctest::Approx(e / (1 + e)).epsilon(1e-6));
    CHECK(p.p_asd == doctest::Approx(1 / (1 + e)).epsilon(1e-6));
    CHECK(std::abs(p.p_td + p.p_asd - 1.0) < 1e-6);
  }

  TEST_CASE("zero features give a subject-independent output") {
    AsdNetConfig c = small_config(3, 4);
    c.standardize = false;
    auto m = make_asdnet(c, 2);
    const FeatureMatrix z{3, 4, Stream::image, std::vector<float>(12, 0.0f)};
    const auto p0 = fuse_and_classify(m, z, z, Mode::eval);
    CHECK(p0.p_td == 0.5);
    CHECK(p0.p_asd == 0.5);
    Rng rng(3);
    for (std::size_t i = 0; i < m.net.size(); ++i)
      if (m.net.has_params(i))
        for (auto& b : m.net.params(i).bias.data()) b = float(rng.normal());
    const auto p1 = fuse_and_classify(m, z, z, Mode::eval);
    const auto p2 = fuse_and_classify(m, z, z, Mode::eval);
    CHECK(p1.p_asd == p2.p_asd);
    CHECK(p1.p_asd != 0.5);
  }

  TEST_CASE("fuse_and_classify checks shapes and normalizes") {
    auto m = make_asdnet(small_config(3, 4), 2);
    const auto a = features(3, 4, Stream::image, 1), b = features(3, 4, Stream::hfm, 2);
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto p = fuse_and_classify(m, a, b, Mode::train, s);
      CHECK(std::abs(p.p_td + p.p_asd - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(fuse_and_classify(m, features(2, 6, Stream::image, 1), features(2, 6, Stream::hfm, 1), Mode::eval),
                    ShapeError);
    CHECK_THROWS_AS(fuse_and_classify(m, a, features(3, 5, Stream::hfm, 1), Mode::eval), ShapeError);
  }

  TEST_CASE("permuting rows with the fc1 columns leaves the output unchanged") {
    AsdNetConfig c = small_config(4, 3);
    c.standardize = false;
    auto m = make_asdnet(c, 9);
    const auto a = features(4, 3, Stream::image, 1), b = features(4, 3, Stream::hfm, 2);
    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    FeatureMatrix pa = a, pb = b;
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t d = 0; d < 3; ++d) {
        pa.values[j * 3 + d] = a.values[perm[j] * 3 + d];
        pb.values[j * 3 + d] = b.values[perm[j] * 3 + d];
      }
    auto pm = m;
    const auto& w = m.net.params(3).weight;
    auto& pw = pm.net.params(3).weight;
    for (std::size_t h = 0; h < c.hidden; ++h)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t d = 0; d < 3; ++d) pw[h * 12 + j * 3 + d] = w[h * 12 + perm[j] * 3 + d];
    const auto p = fuse_and_classify(m, a, b, Mode::eval);
    const auto q = fuse_and_classify(pm, pa, pb, Mode::eval);
    CHECK(q.p_asd == doctest::Approx(p.p_asd).epsilon(1e-6));
    const auto unpermuted = fuse_and_classify(m, pa, pb, Mode::eval);
    CHECK(unpermuted.p_asd != doctest::Approx(p.p_asd).epsilon(1e-6));
  }

  TEST_CASE("keep mask zeroes rows in both streams after standardization") {
    const auto inst = separable_instances(8, 3, 2, 4);
    auto m = make_asdnet(small_config(3, 2), 2);
    fit_standardizer(m, inst);
    CHECK(m.standardized());
    const std::vector<bool> keep = {false, true, false};
    const auto x = head_input<double>(m, *inst[0].image_features, *inst[0].hfm_features, &keep);
    const auto full = head_input<double>(m, *inst[0].image_features, *inst[0].hfm_features);
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t d = 0; d < 2; ++d) {
          const std::size_t k = (s * 3 + i) * 2 + d;
          CHECK(x[k] == (keep[i] ? full[k] : 0.0));
        }
    // Standardized training inputs have zero mean per element.
    std::vector<double> mean(12, 0.0);
    for (const auto& in : inst) {
      const auto h = head_input<double>(m, *in.image_features, *in.hfm_features);
      for (std::size_t k = 0; k < 12; ++k) mean[k] += h[k] / 8;
    }
    for (double v : mean) CHECK(std::abs(v) < 1e-5);
  }

  TEST_CASE("training separates linearly separable features") {
    const auto train = separable_instances(20, 3, 4, 11);
    TrainHyper h;
    h.sgd.base_lr = 1e-3;
    h.max_iter = 1000;
    const auto r = train_asdnet(small_config(3, 4), train, h, 5);
    CHECK(r.curve.size() == 1000);
    for (const auto& pt : r.curve) CHECK(std::isfinite(pt.loss));
    CHECK(instance_accuracy(r.model, train) == 1.0);
    const auto held = separable_instances(10, 3, 4, 12);
    CHECK(instance_accuracy(r.model, held) >= 0.9);
  }

  TEST_CASE("uninformative features plateau at ln 2") {
    auto img = share(features(3, 4, Stream::image, 1));
    auto hfm = share(features(3, 4, Stream::hfm, 2));
    std::vector<SubjectInstance> train;
    for (std::size_t s = 0; s < 20; ++s) train.push_back({"s", 0, img, hfm, s % 2 ? Group::asd : Group::td});
    TrainHyper h;
    h.sgd.base_lr = 1e-3;
    h.max_iter = 600;
    for (bool standardize : {true, false}) {
      CAPTURE(standardize);
      auto c = small_config(3, 4);
      c.standardize = standardize;
      const auto r = train_asdnet(c, train, h, 3);
      double tail = 0.0;
      for (std::size_t i = 400; i < 600; ++i) tail += r.curve[i].loss / 200;
      CHECK(std::abs(tail - std::log(2.0)) < 0.05);
    }
  }

  TEST_CASE("training is seed-deterministic") {
    const auto train = separable_instances(10, 3, 4, 2);
    TrainHyper h;
    h.sgd.base_lr = 1e-3;
    h.max_iter = 60;
    const auto a = train_asdnet(small_config(3, 4), train, h, 8);
    const auto b = train_asdnet(small_config(3, 4), train, h, 8);
    CHECK(a.model.net.checksum() == b.model.net.checksum());
    CHECK(a.model.input_shift == b.model.input_shift);
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
    const auto c = train_asdnet(small_config(3, 4), train, h, 9);
    CHECK(c.model.net.checksum() != a.model.net.checksum());
  }

  TEST_CASE("zero learning rate leaves parameters at initialization") {
    const auto train = separable_instances(10, 3, 4, 2);
    TrainHyper h;
    h.sgd.base_lr = 0.0;
    h.max_iter = 0;
    const auto init = train_asdnet(small_config(3, 4), train, h, 8);
    h.max_iter = 50;
    const auto trained = train_asdnet(small_config(3, 4), train, h, 8);
    CHECK(init.model.net.checksum() == trained.model.net.checksum());
  }

  TEST_CASE("training rejects single-class data and leaves the backbone alone") {
    auto train = separable_instances(6, 3, 4, 2);
    for (auto& i : train) i.label = Group::td;
    CHECK_THROWS(train_asdnet(small_config(3, 4), train, {}, 1));
    CHECK_THROWS(train_asdnet(small_config(3, 4), {}, {}, 1));

    const auto bb = make_backbone({BackboneKind::tiny, 4}, 5);
    const auto before = bb.checksum();
    FeatureExtractor ex(bb);
    std::vector<Tensor<float>> inputs = {variant_input<float>(SourcePlanes{Grid(256, 256, 0.5)}, 0)};
    auto f = share(ex.extract(inputs, Stream::image));
    std::vector<SubjectInstance> inst = {{"a", 0, f, f, Group::td}, {"b", 0, f, f, Group::asd}};
    TrainHyper h;
    h.max_iter = 20;
    train_asdnet(small_config(1, 4), inst, h, 1);
    CHECK(bb.checksum() == before);
  }

  TEST_CASE("test accuracy appears on the curve at the eval cadence") {
    const auto train = separable_instances(10, 3, 4, 2);
    TrainHyper h;
    h.sgd.base_lr = 1e-3;
    h.max_iter = 25;
    h.eval_interval = 10;
    const auto r = train_asdnet(small_config(3, 4), train, h, 1, train);
    CHECK(r.curve[9].test_acc.has_value());
    CHECK_FALSE(r.curve[10].test_acc.has_value());
    CHECK(r.curve[24].test_acc.has_value());
  }

  TEST_CASE("model persistence") {
    testing::TempDir dir("model");
    const auto train = separable_instances(10, 3, 4, 2);
    TrainHyper h;
    h.sgd.base_lr = 1e-3;
    h.max_iter = 30;
    const auto m = train_asdnet(small_config(3, 4), train, h, 4).model;
    save_model(m, dir / "a.gzc");
    const auto back = load_model(dir / "a.gzc");
    save_model(back, dir / "b.gzc");
    CHECK(testing::read_bytes(dir / "a.gzc") == testing::read_bytes(dir / "b.gzc"));
    CHECK(back.standardized());
    CHECK(back.config.hidden == 16);
    for (const auto& inst : train) {
      const auto p = fuse_and_classify(m, *inst.image_features, *inst.hfm_features, Mode::eval);
      const auto q = fuse_and_classify(back, *inst.image_features, *inst.hfm_features, Mode::eval);
      CHECK(p.p_asd == q.p_asd);
      CHECK(p.p_td == q.p_td);
    }

    auto bytes = testing::read_bytes(dir / "a.gzc");
    bytes[1] = 'Q';
    std::ofstream(dir / "bad.gzc", std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    CHECK_THROWS_AS(load_model(dir / "bad.gzc"), FormatError);
    bytes = testing::read_bytes(dir / "a.gzc");
    std::ofstream(dir / "short.gzc", std::ios::binary).write(bytes.data(), std::streamsize(bytes.size() / 2));
    CHECK_THROWS_AS(load_model(dir / "short.gzc"), FormatError);
    write_gzc1(dir / "plain.gzc", export_params(m.net));
    CHECK_THROWS_AS(load_model(dir / "plain.gzc"), FormatError);
  }
}
