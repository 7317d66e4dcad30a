#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gazeclass/tensor.hpp"

namespace gazeclass {

// Layer kinds. Spatial layers operate on C x H x W tensors; Dense accepts any
// shape and treats it as a flat vector.
struct Conv2d {
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
};
struct MaxPool2d {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};
struct Dense {
  std::size_t out_dim = 1;
};
struct Relu {};
struct Dropout {
  double rate = 0.5;
};
struct Flatten {};
struct Softmax {};

using LayerKind = std::variant<Conv2d, MaxPool2d, Dense, Relu, Dropout, Flatten, Softmax>;

enum class Init { xavier, gaussian };

struct LayerSpec {
  std::string name;
  LayerKind kind;
  Init init = Init::xavier;
  double gaussian_std = 0.01;
  bool bias = true;
};

LayerSpec conv2d(std::string name, std::size_t out_channels, std::size_t kernel,
                 std::size_t stride = 1, std::size_t pad = 0);
LayerSpec maxpool2d(std::string name, std::size_t kernel, std::size_t stride);
LayerSpec dense(std::string name, std::size_t out_dim);
LayerSpec relu(std::string name);
LayerSpec dropout(std::string name, double rate);
LayerSpec flatten(std::string name);
LayerSpec softmax(std::string name);

std::string kind_name(const LayerKind& kind);
bool has_params(const LayerKind& kind);

template <typename T>
struct LayerParams {
  Tensor<T> weight;
  Tensor<T> bias;  // empty when the layer has no bias
};

// An ordered layer stack with shapes inferred from the input shape.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<LayerSpec> layers);

  // Re-draws every parameter from the layer initializers. Biases start at zero.
  void initialize(std::uint64_t seed);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const Shape& output_shape(std::size_t layer) const { return output_shapes_.at(layer); }
  const Shape& output_shape() const { return output_shapes_.back(); }
  std::size_t size() const noexcept { return layers_.size(); }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

  bool has_params(std::size_t i) const { return gazeclass::has_params(layers_.at(i).kind); }
  LayerParams<T>& params(std::size_t i) { return params_.at(i); }
  const LayerParams<T>& params(std::size_t i) const { return params_.at(i); }

  bool frozen(std::size_t i) const { return frozen_.at(i); }
  void set_frozen(std::size_t i, bool f) { frozen_.at(i) = f; }
  void freeze_all();

  std::optional<std::size_t> find_layer(const std::string& name) const;
  std::size_t parameter_count() const;
  std::uint64_t checksum() const;

  template <typename U>
  Network<U> cast() const;

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> output_shapes_;
  std::vector<LayerParams<T>> params_;
  std::vector<char> frozen_;

  template <typename U>
  friend class Network;
};

enum class Mode { train, eval };

// Every intermediate activation of one forward pass. activations[0] is the
// input; activations[i + 1] is the output of layer i.
template <typename T>
struct ActivationTrace {
  Mode mode = Mode::eval;
  std::uint64_t seed = 0;
  std::vector<Tensor<T>> activations;
  std::vector<std::vector<std::uint32_t>> argmax;  // max-pool winners per layer
  std::vector<std::vector<std::uint8_t>> keep;     // dropout masks per layer

  const Tensor<T>& output() const { return activations.back(); }
};

template <typename T>
ActivationTrace<T> forward(const Network<T>& net, const Tensor<T>& input, Mode mode,
                           std::optional<std::uint64_t> seed = std::nullopt);

// Forward into a caller-owned trace, reusing its buffers.
template <typename T>
void forward_into(const Network<T>& net, const Tensor<T>& input, Mode mode,
                  std::optional<std::uint64_t> seed, ActivationTrace<T>& trace);

template <typename T>
struct LossResult {
  T loss{};
  Tensor<T> grad;  // d loss / d logits
};

template <typename T>
LossResult<T> loss_softmax_xent(const Tensor<T>& logits, std::size_t label);

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
struct ParamGrad {
  std::size_t layer = 0;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct Gradients {
  std::vector<ParamGrad<T>> params;  // trainable layers only, ascending layer order
  Tensor<T> input;                   // filled when requested

  const ParamGrad<T>* find(std::size_t layer) const;
  void add(const Gradients& other);
  void scale(T factor);
};

struct BackwardOptions {
  // out_grad is taken w.r.t. activations[from_layer]; defaults to the output.
  std::optional<std::size_t> from_layer;
  bool input_grad = false;
};

template <typename T>
Gradients<T> backward(const Network<T>& net, const ActivationTrace<T>& trace,
                      const Tensor<T>& out_grad, BackwardOptions options = {});

// Caffe-style "inv" learning-rate policy with momentum SGD.
struct SgdHyper {
  double base_lr = 1e-5;
  double gamma = 1e-4;
  double power = 0.75;
  double momentum = 0.9;
};

double inv_learning_rate(const SgdHyper& hyper, std::int64_t iter);

template <typename T>
class SgdState {
 public:
  void step(Network<T>& net, const Gradients<T>& grads, std::int64_t iter, const SgdHyper& hyper);

 private:
  std::vector<LayerParams<T>> velocity_;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  Mode mode = Mode::eval;
  std::uint64_t seed = 0;
  // Fault injection hook applied to the analytic gradients before comparison.
  std::function<void(Gradients<double>&)> tamper;
};

struct GradCheckEntry {
  std::string name;  // "<layer>.weight" or "<layer>.bias"
  double max_rel_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed() const;
};

// Loss is softmax cross-entropy on the final output (skipping a trailing
// Softmax layer, whose input is then taken as the logits).
GradCheckReport grad_check(const Network<double>& net, const Tensor<double>& input,
                           std::size_t label, const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric);

// d(out)/d(in)^T * grad_out for a conv or fc layer, ignoring parameter
// gradients. Used by relevance propagation.
template <typename T>
Tensor<T> linear_input_vjp(const Network<T>& net, const ActivationTrace<T>& trace, std::size_t layer,
                           const Tensor<T>& grad_out);

// Index of a trailing Softmax layer, if any.
template <typename T>
std::optional<std::size_t> softmax_layer(const Network<T>& net);

}  // namespace gazeclass
