#include "gazeclass/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gazeclass/hash.hpp"
#include "gazeclass/rng.hpp"

namespace gazeclass {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

LayerSpec conv2d(std::string name, std::size_t out_channels, std::size_t kernel,
                 std::size_t stride, std::size_t pad) {
  return {std::move(name), Conv2d{out_channels, kernel, stride, pad}};
}
LayerSpec maxpool2d(std::string name, std::size_t kernel, std::size_t stride) {
  return {std::move(name), MaxPool2d{kernel, stride}};
}
LayerSpec dense(std::string name, std::size_t out_dim) {
  return {std::move(name), Dense{out_dim}, Init::gaussian};
}
LayerSpec relu(std::string name) { return {std::move(name), Relu{}}; }
LayerSpec dropout(std::string name, double rate) { return {std::move(name), Dropout{rate}}; }
LayerSpec flatten(std::string name) { return {std::move(name), Flatten{}}; }
LayerSpec softmax(std::string name) { return {std::move(name), Softmax{}}; }

std::string kind_name(const LayerKind& kind) {
  return std::visit(Overloaded{
                        [](const Conv2d&) { return std::string("conv2d"); },
                        [](const MaxPool2d&) { return std::string("maxpool2d"); },
                        [](const Dense&) { return std::string("fc"); },
                        [](const Relu&) { return std::string("relu"); },
                        [](const Dropout&) { return std::string("dropout"); },
                        [](const Flatten&) { return std::string("flatten"); },
                        [](const Softmax&) { return std::string("softmax"); },
                    },
                    kind);
}

bool has_params(const LayerKind& kind) {
  return std::holds_alternative<Conv2d>(kind) || std::holds_alternative<Dense>(kind);
}

namespace {

Shape infer_output(const LayerSpec& spec, const Shape& in) {
  const auto need_chw = [&](const char* what) {
    if (in.size() != 3) {
      throw ShapeError(spec.name + ": " + what + " expects a CxHxW input, got " +
                       shape_to_string(in));
    }
  };
  return std::visit(
      Overloaded{
          [&](const Conv2d& c) -> Shape {
            need_chw("conv2d");
            if (c.kernel == 0 || c.stride == 0 || c.out_channels == 0) {
              throw ShapeError(spec.name + ": conv2d kernel, stride and channels must be positive");
            }
            if (in[1] + 2 * c.pad < c.kernel || in[2] + 2 * c.pad < c.kernel) {
              throw ShapeError(spec.name + ": kernel larger than padded input");
            }
            return {c.out_channels, (in[1] + 2 * c.pad - c.kernel) / c.stride + 1,
                    (in[2] + 2 * c.pad - c.kernel) / c.stride + 1};
          },
          [&](const MaxPool2d& p) -> Shape {
            need_chw("maxpool2d");
            if (p.kernel == 0 || p.stride == 0) {
              throw ShapeError(spec.name + ": maxpool2d kernel and stride must be positive");
            }
            if (in[1] < p.kernel || in[2] < p.kernel) {
              throw ShapeError(spec.name + ": pool window larger than input");
            }
            return {in[0], (in[1] - p.kernel) / p.stride + 1, (in[2] - p.kernel) / p.stride + 1};
          },
          [&](const Dense& d) -> Shape {
            if (d.out_dim == 0) throw ShapeError(spec.name + ": fc output size must be positive");
            return {d.out_dim};
          },
          [&](const Relu&) -> Shape { return in; },
          [&](const Dropout& d) -> Shape {
            if (!(d.rate >= 0.0 && d.rate < 1.0)) {
              throw ShapeError(spec.name + ": dropout rate must be in [0, 1)");
            }
            return in;
          },
          [&](const Flatten&) -> Shape { return {shape_size(in)}; },
          [&](const Softmax&) -> Shape { return in; },
      },
      spec.kind);
}

std::size_t fan_in(const Shape& weight_shape) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < weight_shape.size(); ++i) n *= weight_shape[i];
  return n;
}

}  // namespace

template <typename T>
Network<T>::Network(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) {
    throw ShapeError("network input shape must be non-empty and positive");
  }
  Shape current = input_shape_;
  params_.resize(layers_.size());
  frozen_.assign(layers_.size(), 0);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& spec = layers_[i];
    if (std::holds_alternative<Conv2d>(spec.kind)) {
      const auto& c = std::get<Conv2d>(spec.kind);
      if (current.size() != 3) {
        throw ShapeError(spec.name + ": conv2d expects a CxHxW input, got " +
                         shape_to_string(current));
      }
      params_[i].weight = Tensor<T>({c.out_channels, current[0], c.kernel, c.kernel});
      if (spec.bias) params_[i].bias = Tensor<T>({c.out_channels});
    } else if (std::holds_alternative<Dense>(spec.kind)) {
      const auto& d = std::get<Dense>(spec.kind);
      if (d.out_dim == 0) throw ShapeError(spec.name + ": fc output size must be positive");
      params_[i].weight = Tensor<T>({d.out_dim, shape_size(current)});
      if (spec.bias) params_[i].bias = Tensor<T>({d.out_dim});
    }
    current = infer_output(spec, current);
    output_shapes_.push_back(current);
  }
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!has_params(i)) continue;
    auto& p = params_[i];
    Rng rng(derive_seed(seed, i));
    const auto& spec = layers_[i];
    if (spec.init == Init::xavier) {
      const double limit = std::sqrt(3.0 / static_cast<double>(fan_in(p.weight.shape())));
      for (auto& w : p.weight.data()) w = static_cast<T>(rng.uniform(-limit, limit));
    } else {
      for (auto& w : p.weight.data()) w = static_cast<T>(rng.normal(0.0, spec.gaussian_std));
    }
    if (!p.bias.empty()) p.bias.fill(T{0});
  }
}

template <typename T>
void Network<T>::freeze_all() {
  std::fill(frozen_.begin(), frozen_.end(), 1);
}

template <typename T>
std::optional<std::size_t> Network<T>::find_layer(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weight.size() + p.bias.size();
  return n;
}

template <typename T>
std::uint64_t Network<T>::checksum() const {
  Fnv1a h;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    h.update_u64(i);
    for (const auto* t : {&params_[i].weight, &params_[i].bias}) {
      for (const auto d : t->shape()) h.update_u64(d);
      h.update(t->data());
    }
  }
  return h.digest();
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> out;
  out.input_shape_ = input_shape_;
  out.layers_ = layers_;
  out.output_shapes_ = output_shapes_;
  out.frozen_ = frozen_;
  out.params_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].weight.empty()) out.params_[i].weight = params_[i].weight.template cast<U>();
    if (!params_[i].bias.empty()) out.params_[i].bias = params_[i].bias.template cast<U>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
void ensure_shape(Tensor<T>& t, const Shape& shape) {
  if (t.shape() != shape) t = Tensor<T>(shape);
}

// Valid output range [lo, hi) for which the input index o*stride + k - pad is
// inside [0, n).
inline void valid_range(std::size_t n_out, std::size_t n_in, std::size_t stride, std::size_t k,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // o*stride + k >= pad  and  o*stride + k - pad <= n_in - 1
  lo = (k >= pad) ? 0 : (pad - k + stride - 1) / stride;
  const std::ptrdiff_t max_num = static_cast<std::ptrdiff_t>(n_in) - 1 +
                                 static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
  if (max_num < 0) {
    lo = hi = 0;
    return;
  }
  hi = std::min(n_out, static_cast<std::size_t>(max_num) / stride + 1);
  if (lo > hi) lo = hi;
}

template <typename T>
void conv_forward(const Conv2d& c, const LayerParams<T>& p, const Tensor<T>& in, Tensor<T>& out) {
  const std::size_t ic = in.dim(0), ih = in.dim(1), iw = in.dim(2);
  const std::size_t oc = out.dim(0), oh = out.dim(1), ow = out.dim(2);
  const std::size_t k = c.kernel, s = c.stride, pad = c.pad;
  const T* x = in.raw();
  const T* w = p.weight.raw();
  T* y = out.raw();
  for (std::size_t o = 0; o < oc; ++o) {
    T* yo = y + o * oh * ow;
    const T b = p.bias.empty() ? T{0} : p.bias[o];
    std::fill(yo, yo + oh * ow, b);
    for (std::size_t i = 0; i < ic; ++i) {
      const T* xi = x + i * ih * iw;
      for (std::size_t ky = 0; ky < k; ++ky) {
        std::size_t ylo, yhi;
        valid_range(oh, ih, s, ky, pad, ylo, yhi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t xlo, xhi;
          valid_range(ow, iw, s, kx, pad, xlo, xhi);
          const T wv = w[((o * ic + i) * k + ky) * k + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T* row = xi + (oy * s + ky - pad) * iw;
            T* yrow = yo + oy * ow;
            if (s == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * row[ox + kx - pad];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * row[ox * s + kx - pad];
            }
          }
        }
      }
    }
  }
}

// Accumulates d/dW, d/db (when gw != nullptr) and d/dx (when gx != nullptr).
template <typename T>
void conv_backward(const Conv2d& c, const LayerParams<T>& p, const Tensor<T>& in,
                   const Tensor<T>& gout, Tensor<T>* gw, Tensor<T>* gb, Tensor<T>* gx) {
  const std::size_t ic = in.dim(0), ih = in.dim(1), iw = in.dim(2);
  const std::size_t oc = gout.dim(0), oh = gout.dim(1), ow = gout.dim(2);
  const std::size_t k = c.kernel, s = c.stride, pad = c.pad;
  const T* x = in.raw();
  const T* g = gout.raw();
  const T* w = p.weight.raw();
  for (std::size_t o = 0; o < oc; ++o) {
    const T* go = g + o * oh * ow;
    if (gb) {
      T acc{0};
      for (std::size_t j = 0; j < oh * ow; ++j) acc += go[j];
      (*gb)[o] += acc;
    }
    for (std::size_t i = 0; i < ic; ++i) {
      const T* xi = x + i * ih * iw;
      T* gxi = gx ? gx->raw() + i * ih * iw : nullptr;
      for (std::size_t ky = 0; ky < k; ++ky) {
        std::size_t ylo, yhi;
        valid_range(oh, ih, s, ky, pad, ylo, yhi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t xlo, xhi;
          valid_range(ow, iw, s, kx, pad, xlo, xhi);
          const std::size_t widx = ((o * ic + i) * k + ky) * k + kx;
          const T wv = w[widx];
          T acc{0};
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * s + ky - pad;
            const T* grow = go + oy * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) {
              const std::size_t ix = ox * s + kx - pad;
              acc += grow[ox] * xi[iy * iw + ix];
              if (gxi) gxi[iy * iw + ix] += wv * grow[ox];
            }
          }
          if (gw) (*gw)[widx] += acc;
        }
      }
    }
  }
}

template <typename T>
void pool_forward(const MaxPool2d& pl, const Tensor<T>& in, Tensor<T>& out,
                  std::vector<std::uint32_t>& argmax) {
  const std::size_t ch = in.dim(0), ih = in.dim(1), iw = in.dim(2);
  const std::size_t oh = out.dim(1), ow = out.dim(2);
  argmax.resize(out.size());
  const T* x = in.raw();
  T* y = out.raw();
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (c * ih + oy * pl.stride) * iw + ox * pl.stride;
        for (std::size_t ky = 0; ky < pl.kernel; ++ky) {
          const std::size_t base = (c * ih + oy * pl.stride + ky) * iw + ox * pl.stride;
          for (std::size_t kx = 0; kx < pl.kernel; ++kx) {
            // Strict comparison keeps the first row-major index on ties.
            if (x[base + kx] > x[best]) best = base + kx;
          }
        }
        const std::size_t o = (c * oh + oy) * ow + ox;
        argmax[o] = static_cast<std::uint32_t>(best);
        y[o] = x[best];
      }
    }
  }
}

template <typename T>
void dense_forward(const LayerParams<T>& p, const Tensor<T>& in, Tensor<T>& out) {
  const std::size_t n_out = p.weight.dim(0), n_in = p.weight.dim(1);
  const T* w = p.weight.raw();
  const T* x = in.raw();
  for (std::size_t o = 0; o < n_out; ++o) {
    const T* row = w + o * n_in;
    T acc{0};
    for (std::size_t j = 0; j < n_in; ++j) acc += row[j] * x[j];
    out[o] = acc + (p.bias.empty() ? T{0} : p.bias[o]);
  }
}

template <typename T>
void dense_backward(const LayerParams<T>& p, const Tensor<T>& in, const Tensor<T>& gout,
                    Tensor<T>* gw, Tensor<T>* gb, Tensor<T>* gx) {
  const std::size_t n_out = p.weight.dim(0), n_in = p.weight.dim(1);
  const T* w = p.weight.raw();
  const T* x = in.raw();
  for (std::size_t o = 0; o < n_out; ++o) {
    const T g = gout[o];
    if (gb) (*gb)[o] += g;
    if (g == T{0}) continue;
    if (gw) {
      T* row = gw->raw() + o * n_in;
      for (std::size_t j = 0; j < n_in; ++j) row[j] += g * x[j];
    }
    if (gx) {
      const T* wrow = w + o * n_in;
      T* dx = gx->raw();
      for (std::size_t j = 0; j < n_in; ++j) dx[j] += g * wrow[j];
    }
  }
}

template <typename T>
void softmax_into(const T* z, std::size_t n, T* out) {
  T m = z[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, z[i]);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(z[i] - m);
    total += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= total;
}

}  // namespace

template <typename T>
void forward_into(const Network<T>& net, const Tensor<T>& input, Mode mode,
                  std::optional<std::uint64_t> seed, ActivationTrace<T>& trace) {
  if (input.shape() != net.input_shape()) {
    throw ShapeError("forward: input shape " + shape_to_string(input.shape()) +
                     " does not match network input " + shape_to_string(net.input_shape()));
  }
  if (mode == Mode::train && !seed) {
    throw Error("forward: train mode requires a dropout seed");
  }
  const std::size_t n = net.size();
  trace.mode = mode;
  trace.seed = seed.value_or(0);
  trace.activations.resize(n + 1);
  trace.argmax.resize(n);
  trace.keep.resize(n);
  trace.activations[0] = input;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& spec = net.layer(i);
    const Tensor<T>& x = trace.activations[i];
    Tensor<T>& y = trace.activations[i + 1];
    ensure_shape(y, net.output_shape(i));
    std::visit(Overloaded{
                   [&](const Conv2d& c) { conv_forward(c, net.params(i), x, y); },
                   [&](const MaxPool2d& p) { pool_forward(p, x, y, trace.argmax[i]); },
                   [&](const Dense&) { dense_forward(net.params(i), x, y); },
                   [&](const Relu&) {
                     for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] > T{0} ? x[j] : T{0};
                   },
                   [&](const Dropout& d) {
                     if (mode == Mode::eval || d.rate == 0.0) {
                       std::copy(x.raw(), x.raw() + x.size(), y.raw());
                       trace.keep[i].clear();
                       return;
                     }
                     Rng rng(derive_seed(*seed, 0x64726f70ULL, i));
                     auto& keep = trace.keep[i];
                     keep.resize(x.size());
                     const T scale = static_cast<T>(1.0 / (1.0 - d.rate));
                     for (std::size_t j = 0; j < x.size(); ++j) {
                       keep[j] = rng.uniform() >= d.rate ? 1 : 0;
                       y[j] = keep[j] ? x[j] * scale : T{0};
                     }
                   },
                   [&](const Flatten&) { std::copy(x.raw(), x.raw() + x.size(), y.raw()); },
                   [&](const Softmax&) { softmax_into(x.raw(), x.size(), y.raw()); },
               },
               spec.kind);
    if (!y.all_finite()) {
      throw NumericError("forward: non-finite activation produced by layer '" + spec.name + "'");
    }
  }
}

template <typename T>
ActivationTrace<T> forward(const Network<T>& net, const Tensor<T>& input, Mode mode,
                           std::optional<std::uint64_t> seed) {
  ActivationTrace<T> trace;
  forward_into(net, input, mode, seed, trace);
  return trace;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  softmax_into(logits.raw(), logits.size(), out.raw());
  return out;
}

template <typename T>
LossResult<T> loss_softmax_xent(const Tensor<T>& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw Error("loss_softmax_xent: label " + std::to_string(label) + " out of range for " +
                std::to_string(logits.size()) + " classes");
  }
  LossResult<T> r;
  r.grad = softmax(logits);
  T m = logits[0];
  for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  T total{0};
  for (std::size_t i = 0; i < logits.size(); ++i) total += std::exp(logits[i] - m);
  r.loss = std::log(total) + m - logits[label];
  r.grad[label] -= T{1};
  return r;
}

template <typename T>
const ParamGrad<T>* Gradients<T>::find(std::size_t layer) const {
  for (const auto& p : params) {
    if (p.layer == layer) return &p;
  }
  return nullptr;
}

template <typename T>
void Gradients<T>::add(const Gradients& other) {
  if (params.empty()) {
    params = other.params;
    return;
  }
  if (params.size() != other.params.size()) throw ShapeError("gradient sets differ in layout");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& a = params[i];
    const auto& b = other.params[i];
    if (a.layer != b.layer || a.weight.shape() != b.weight.shape()) {
      throw ShapeError("gradient sets differ in layout");
    }
    for (std::size_t j = 0; j < a.weight.size(); ++j) a.weight[j] += b.weight[j];
    for (std::size_t j = 0; j < a.bias.size(); ++j) a.bias[j] += b.bias[j];
  }
}

template <typename T>
void Gradients<T>::scale(T factor) {
  for (auto& p : params) {
    for (auto& v : p.weight.data()) v *= factor;
    for (auto& v : p.bias.data()) v *= factor;
  }
  for (auto& v : input.data()) v *= factor;
}

template <typename T>
Gradients<T> backward(const Network<T>& net, const ActivationTrace<T>& trace,
                      const Tensor<T>& out_grad, BackwardOptions options) {
  const std::size_t n = net.size();
  if (trace.activations.size() != n + 1 || trace.argmax.size() != n || trace.keep.size() != n) {
    throw ShapeError("backward: trace was not produced by this network");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (trace.activations[i + 1].shape() != net.output_shape(i)) {
      throw ShapeError("backward: trace shape mismatch at layer '" + net.layer(i).name + "'");
    }
  }
  const std::size_t from = options.from_layer.value_or(n);
  if (from > n) throw ShapeError("backward: from_layer out of range");
  if (out_grad.shape() != trace.activations[from].shape()) {
    throw ShapeError("backward: gradient shape " + shape_to_string(out_grad.shape()) +
                     " does not match activation " +
                     shape_to_string(trace.activations[from].shape()));
  }

  std::size_t stop = from;
  for (std::size_t i = 0; i < from; ++i) {
    if (net.has_params(i) && !net.frozen(i)) {
      stop = i;
      break;
    }
  }
  if (options.input_grad) stop = 0;

  Gradients<T> result;
  Tensor<T> g = out_grad;
  for (std::size_t i = from; i-- > stop;) {
    const auto& spec = net.layer(i);
    const Tensor<T>& x = trace.activations[i];
    const Tensor<T>& y = trace.activations[i + 1];
    const bool trainable = net.has_params(i) && !net.frozen(i);
    const bool need_gx = i > stop || options.input_grad;
    Tensor<T> gx;
    if (need_gx) gx = Tensor<T>(x.shape());
    ParamGrad<T> pg;
    if (trainable) {
      pg.layer = i;
      pg.weight = Tensor<T>(net.params(i).weight.shape());
      if (!net.params(i).bias.empty()) pg.bias = Tensor<T>(net.params(i).bias.shape());
    }
    Tensor<T>* gw = trainable ? &pg.weight : nullptr;
    Tensor<T>* gb = (trainable && !pg.bias.empty()) ? &pg.bias : nullptr;
    Tensor<T>* gxp = need_gx ? &gx : nullptr;
    std::visit(Overloaded{
                   [&](const Conv2d& c) { conv_backward(c, net.params(i), x, g, gw, gb, gxp); },
                   [&](const MaxPool2d&) {
                     if (!gxp) return;
                     const auto& am = trace.argmax[i];
                     if (am.size() != g.size()) throw ShapeError("backward: missing pool indices");
                     for (std::size_t j = 0; j < g.size(); ++j) gx[am[j]] += g[j];
                   },
                   [&](const Dense&) { dense_backward(net.params(i), x, g, gw, gb, gxp); },
                   [&](const Relu&) {
                     if (!gxp) return;
                     for (std::size_t j = 0; j < g.size(); ++j) gx[j] = x[j] > T{0} ? g[j] : T{0};
                   },
                   [&](const Dropout& d) {
                     if (!gxp) return;
                     const auto& keep = trace.keep[i];
                     if (trace.mode == Mode::eval || keep.empty()) {
                       gx = g.reshaped(x.shape());
                       return;
                     }
                     const T scale = static_cast<T>(1.0 / (1.0 - d.rate));
                     for (std::size_t j = 0; j < g.size(); ++j) gx[j] = keep[j] ? g[j] * scale : T{0};
                   },
                   [&](const Flatten&) {
                     if (gxp) gx = g.reshaped(x.shape());
                   },
                   [&](const Softmax&) {
                     if (!gxp) return;
                     T dot{0};
                     for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * y[j];
                     for (std::size_t j = 0; j < g.size(); ++j) gx[j] = y[j] * (g[j] - dot);
                   },
               },
               spec.kind);
    if (trainable) result.params.push_back(std::move(pg));
    if (need_gx) g = std::move(gx);
  }
  std::reverse(result.params.begin(), result.params.end());
  if (options.input_grad) result.input = std::move(g);
  return result;
}

double inv_learning_rate(const SgdHyper& hyper, std::int64_t iter) {
  if (iter < 0) throw Error("inv_learning_rate: iteration must be non-negative");
  return hyper.base_lr * std::pow(1.0 + hyper.gamma * static_cast<double>(iter), -hyper.power);
}

template <typename T>
void SgdState<T>::step(Network<T>& net, const Gradients<T>& grads, std::int64_t iter,
                       const SgdHyper& hyper) {
  const double lr = inv_learning_rate(hyper, iter);
  if (velocity_.size() != net.size()) velocity_.assign(net.size(), {});
  const T m = static_cast<T>(hyper.momentum);
  const T rate = static_cast<T>(lr);
  // Validate everything before touching the parameters so a failed step is atomic.
  std::vector<LayerParams<T>> next_v(grads.params.size());
  for (std::size_t k = 0; k < grads.params.size(); ++k) {
    const auto& pg = grads.params[k];
    if (pg.layer >= net.size() || !net.has_params(pg.layer)) {
      throw ShapeError("sgd_step: gradient for a layer without parameters");
    }
    if (net.frozen(pg.layer)) continue;
    auto& p = net.params(pg.layer);
    auto& v = velocity_[pg.layer];
    if (v.weight.shape() != p.weight.shape()) v.weight = Tensor<T>(p.weight.shape());
    if (!p.bias.empty() && v.bias.shape() != p.bias.shape()) v.bias = Tensor<T>(p.bias.shape());
    if (pg.weight.shape() != p.weight.shape() || pg.bias.shape() != p.bias.shape()) {
      throw ShapeError("sgd_step: gradient shape mismatch at layer '" + net.layer(pg.layer).name + "'");
    }
    auto update = [&](const Tensor<T>& param, const Tensor<T>& vel, const Tensor<T>& grad) {
      Tensor<T> out = vel;
      for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = m * vel[j] - rate * grad[j];
        if (!std::isfinite(out[j]) || !std::isfinite(param[j] + out[j])) {
          throw NumericError("sgd_step: non-finite update at layer '" + net.layer(pg.layer).name + "'");
        }
      }
      return out;
    };
    next_v[k].weight = update(p.weight, v.weight, pg.weight);
    if (!p.bias.empty()) next_v[k].bias = update(p.bias, v.bias, pg.bias);
  }
  for (std::size_t k = 0; k < grads.params.size(); ++k) {
    const auto layer = grads.params[k].layer;
    if (net.frozen(layer)) continue;
    auto& p = net.params(layer);
    auto& v = velocity_[layer];
    v.weight = std::move(next_v[k].weight);
    for (std::size_t j = 0; j < p.weight.size(); ++j) p.weight[j] += v.weight[j];
    if (!p.bias.empty()) {
      v.bias = std::move(next_v[k].bias);
      for (std::size_t j = 0; j < p.bias.size(); ++j) p.bias[j] += v.bias[j];
    }
  }
}

template <typename T>
Tensor<T> linear_input_vjp(const Network<T>& net, const ActivationTrace<T>& trace, std::size_t layer,
                           const Tensor<T>& grad_out) {
  const Tensor<T>& x = trace.activations.at(layer);
  if (grad_out.shape() != net.output_shape(layer)) throw ShapeError("linear_input_vjp: gradient shape mismatch");
  Tensor<T> gx(x.shape());
  const auto& kind = net.layer(layer).kind;
  if (const auto* c = std::get_if<Conv2d>(&kind)) {
    conv_backward(*c, net.params(layer), x, grad_out, static_cast<Tensor<T>*>(nullptr), static_cast<Tensor<T>*>(nullptr), &gx);
  } else if (std::holds_alternative<Dense>(kind)) {
    dense_backward(net.params(layer), x, grad_out, static_cast<Tensor<T>*>(nullptr), static_cast<Tensor<T>*>(nullptr), &gx);
  } else {
    throw Error("linear_input_vjp: layer '" + net.layer(layer).name + "' is not conv or fc");
  }
  return gx;
}

template <typename T>
std::optional<std::size_t> softmax_layer(const Network<T>& net) {
  if (net.size() > 0 && std::holds_alternative<Softmax>(net.layer(net.size() - 1).kind)) {
    return net.size() - 1;
  }
  return std::nullopt;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

bool GradCheckReport::passed() const {
  return std::none_of(entries.begin(), entries.end(), [](const auto& e) { return e.flagged; });
}

GradCheckReport grad_check(const Network<double>& net, const Tensor<double>& input,
                           std::size_t label, const GradCheckOptions& options) {
  const auto logits_index = softmax_layer(net).value_or(net.size());
  const std::optional<std::uint64_t> seed =
      options.mode == Mode::train ? std::optional<std::uint64_t>(options.seed) : std::nullopt;
  auto loss_of = [&](const Network<double>& n) {
    const auto trace = forward(n, input, options.mode, seed);
    return loss_softmax_xent(trace.activations[logits_index], label).loss;
  };

  const auto trace = forward(net, input, options.mode, seed);
  const auto loss = loss_softmax_xent(trace.activations[logits_index], label);
  auto grads = backward(net, trace, loss.grad, {.from_layer = logits_index});
  if (options.tamper) options.tamper(grads);

  GradCheckReport report;
  Network<double> probe = net;
  for (const auto& pg : grads.params) {
    const auto& spec = net.layer(pg.layer);
    auto check = [&](const char* suffix, Tensor<double>& param, const Tensor<double>& analytic) {
      GradCheckEntry e{spec.name + suffix};
      for (std::size_t j = 0; j < param.size(); ++j) {
        const double saved = param[j];
        param[j] = saved + options.h;
        const double up = loss_of(probe);
        param[j] = saved - options.h;
        const double down = loss_of(probe);
        param[j] = saved;
        const double numeric = (up - down) / (2.0 * options.h);
        e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[j], numeric));
      }
      e.flagged = !(e.max_rel_error < options.tolerance);
      report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
      report.entries.push_back(std::move(e));
    };
    check(".weight", probe.params(pg.layer).weight, pg.weight);
    if (!pg.bias.empty()) check(".bias", probe.params(pg.layer).bias, pg.bias);
  }
  return report;
}

#define GAZECLASS_INSTANTIATE(T)                                                              \
  template class Network<T>;                                                                  \
  template struct Gradients<T>;                                                               \
  template class SgdState<T>;                                                                 \
  template ActivationTrace<T> forward(const Network<T>&, const Tensor<T>&, Mode,              \
                                      std::optional<std::uint64_t>);                          \
  template void forward_into(const Network<T>&, const Tensor<T>&, Mode,                       \
                             std::optional<std::uint64_t>, ActivationTrace<T>&);              \
  template Tensor<T> softmax(const Tensor<T>&);                                               \
  template LossResult<T> loss_softmax_xent(const Tensor<T>&, std::size_t);                    \
  template Gradients<T> backward(const Network<T>&, const ActivationTrace<T>&, const Tensor<T>&, \
                                 BackwardOptions);                                            \
  template std::optional<std::size_t> softmax_layer(const Network<T>&);                        \
  template Tensor<T> linear_input_vjp(const Network<T>&, const ActivationTrace<T>&, std::size_t, \
                                      const Tensor<T>&);

GAZECLASS_INSTANTIATE(float)
GAZECLASS_INSTANTIATE(double)
#undef GAZECLASS_INSTANTIATE

template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;

}  // namespace gazeclass
