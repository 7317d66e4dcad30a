#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gazeclass {

// Row-major N x d point matrix.
struct PointMatrix {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  PointMatrix() = default;
  PointMatrix(std::size_t rows, std::size_t cols) : n(rows), dim(cols), values(rows * cols) {}
  double* row(std::size_t i) { return values.data() + i * dim; }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

std::size_t default_perplexity_cap(std::size_t n);  // min(30, floor((n - 1) / 3))

struct TsneOptions {
  std::optional<double> perplexity;  // default_perplexity_cap(n) when unset
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  double init_std = 1e-4;
  // Per-coordinate step gains: +0.2 when the gradient sign opposes the
  // velocity, x0.8 otherwise, floored at min_gain.
  bool adaptive_gains = true;
  double min_gain = 0.01;
  std::uint64_t seed = 1;
};

struct Affinities {
  std::size_t n = 0;
  std::vector<double> p;        // symmetric joint P, N x N, sums to 1
  std::vector<double> beta;     // per-row precision 1 / (2 sigma^2)
  std::vector<double> entropy;  // achieved conditional entropy (nats)
};

// Per-row bisection on log(beta) until |H - log(perplexity)| < 1e-5 (<= 50
// steps); then P = (P_cond + P_cond^T) / 2N.
Affinities joint_affinities(const PointMatrix& x, double perplexity);

double kl_divergence(const std::vector<double>& p, const PointMatrix& y);
PointMatrix kl_gradient(const std::vector<double>& p, const PointMatrix& y);

struct Embedding2D {
  PointMatrix coords;        // N x 2
  std::vector<double> kl;    // one entry per iteration, unexaggerated P
  double perplexity = 0.0;
  std::size_t exaggeration_iters = 0;
};

// `point_keys` seed each point's initial position independently (defaults to
// the row index), so permuting inputs and keys permutes the output.
Embedding2D tsne(const PointMatrix& x, const TsneOptions& options = {},
                 std::span<const std::uint64_t> point_keys = {});

struct KlCheck {
  bool passed = true;
  std::size_t windows = 0;
  double worst_increase = 0.0;
};

// After the exaggeration phase the 50-iteration moving average of the KL
// trace must not rise by more than `slack`. Non-finite entries fail.
KlCheck kl_trace_check(const Embedding2D& embedding, std::size_t window = 50, double slack = 1e-3);

// Mean silhouette coefficient with Euclidean distance.
double silhouette_score(const PointMatrix& points, std::span<const int> labels);

void write_scatter_csv(const std::filesystem::path& path, const Embedding2D& embedding,
                       std::span<const std::string> ids, std::span<const std::string> labels);
void write_kl_csv(const std::filesystem::path& path, const Embedding2D& embedding);

}  // namespace gazeclass
