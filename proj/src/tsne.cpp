#include "gazeclass/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "gazeclass/error.hpp"
#include "gazeclass/rng.hpp"

namespace gazeclass {

std::size_t default_perplexity_cap(std::size_t n) { return std::min<std::size_t>(30, n > 0 ? (n - 1) / 3 : 0); }

namespace {

std::vector<double> squared_distances(const PointMatrix& x) {
  std::vector<double> d(x.n * x.n, 0.0);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = i + 1; j < x.n; ++j) {
      double s = 0.0;
      const double* a = x.row(i);
      const double* b = x.row(j);
      for (std::size_t k = 0; k < x.dim; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      d[i * x.n + j] = d[j * x.n + i] = s;
    }
  }
  return d;
}

// Conditional row for precision beta; returns entropy in nats.
double conditional_row(const double* dist, std::size_t n, std::size_t i, double beta, double* out) {
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (j != i) dmin = std::min(dmin, dist[j]);
  }
  double sum = 0.0, dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = j == i ? 0.0 : std::exp(-beta * (dist[j] - dmin));
    sum += out[j];
    dot += out[j] * (dist[j] - dmin);
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  return std::log(sum) + beta * dot / sum;
}

void validate_points(const PointMatrix& x) {
  if (x.n < 4) throw Error("t-SNE needs at least 4 points");
  if (x.dim == 0 || x.values.size() != x.n * x.dim) throw Error("t-SNE: malformed point matrix");
  for (const double v : x.values) {
    if (!std::isfinite(v)) throw NumericError("t-SNE: non-finite input value");
  }
}

}  // namespace

Affinities joint_affinities(const PointMatrix& x, double perplexity) {
  validate_points(x);
  const std::size_t n = x.n;
  if (!(perplexity > 0.0) || perplexity > static_cast<double>(n - 1) / 3.0) {
    throw Error("t-SNE: perplexity " + std::to_string(perplexity) + " infeasible for " + std::to_string(n) +
                " points (must be in (0, (N-1)/3])");
  }
  const auto dist = squared_distances(x);
  if (std::all_of(dist.begin(), dist.end(), [](double d) { return d == 0.0; })) {
    throw Error("t-SNE: all points are identical");
  }
  const double target = std::log(perplexity);
  std::vector<double> cond(n * n);
  Affinities a;
  a.n = n;
  a.beta.resize(n);
  a.entropy.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* drow = dist.data() + i * n;
    double* prow = cond.data() + i * n;
    // Bracket log(beta) around a scale-aware start.
    double spread = 0.0;
    for (std::size_t j = 0; j < n; ++j) spread += drow[j];
    spread /= static_cast<double>(n - 1);
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    double lb = spread > 0.0 ? -std::log(spread) : 0.0;
    double h = conditional_row(drow, n, i, std::exp(lb), prow);
    for (int step = 0; step < 50 && std::abs(h - target) >= 1e-5; ++step) {
      if (h > target) {
        lo = lb;
        lb = std::isinf(hi) ? lb + 1.0 : 0.5 * (lb + hi);
      } else {
        hi = lb;
        lb = std::isinf(lo) ? lb - 1.0 : 0.5 * (lb + lo);
      }
      h = conditional_row(drow, n, i, std::exp(lb), prow);
    }
    a.beta[i] = std::exp(lb);
    a.entropy[i] = h;
  }
  a.p.assign(n * n, 0.0);
  const double norm = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a.p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / norm;
  }
  return a;
}

namespace {

// Student-t kernel numerators and their sum.
double student_q(const PointMatrix& y, std::vector<double>& num) {
  const std::size_t n = y.n;
  num.assign(n * n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y.row(i)[0] - y.row(j)[0];
      const double dy = y.row(i)[1] - y.row(j)[1];
      const double q = 1.0 / (1.0 + dx * dx + dy * dy);
      num[i * n + j] = num[j * n + i] = q;
      z += 2.0 * q;
    }
  }
  return z;
}

double kl_with(const std::vector<double>& p, const std::vector<double>& num, double z) {
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) kl += p[k] * std::log(p[k] / std::max(num[k] / z, 1e-300));
  }
  return kl;
}

void gradient_with(const std::vector<double>& p, double scale, const PointMatrix& y, const std::vector<double>& num,
                   double z, PointMatrix& grad) {
  const std::size_t n = y.n;
  for (std::size_t i = 0; i < n; ++i) {
    double gx = 0.0, gy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double w = (scale * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
      gx += w * (y.row(i)[0] - y.row(j)[0]);
      gy += w * (y.row(i)[1] - y.row(j)[1]);
    }
    grad.row(i)[0] = 4.0 * gx;
    grad.row(i)[1] = 4.0 * gy;
  }
}

void check_embedding_args(const std::vector<double>& p, const PointMatrix& y) {
  if (y.dim != 2 || p.size() != y.n * y.n) throw ShapeError("t-SNE: P and embedding sizes differ");
}

}  // namespace

double kl_divergence(const std::vector<double>& p, const PointMatrix& y) {
  check_embedding_args(p, y);
  std::vector<double> num;
  const double z = student_q(y, num);
  return kl_with(p, num, z);
}

PointMatrix kl_gradient(const std::vector<double>& p, const PointMatrix& y) {
  check_embedding_args(p, y);
  std::vector<double> num;
  const double z = student_q(y, num);
  PointMatrix g(y.n, 2);
  gradient_with(p, 1.0, y, num, z, g);
  return g;
}

Embedding2D tsne(const PointMatrix& x, const TsneOptions& options, std::span<const std::uint64_t> point_keys) {
  validate_points(x);
  if (options.iterations < 250) throw Error("t-SNE: at least 250 iterations are required");
  if (!point_keys.empty() && point_keys.size() != x.n) throw Error("t-SNE: one key per point is required");
  const double perplexity = options.perplexity.value_or(static_cast<double>(default_perplexity_cap(x.n)));
  const auto aff = joint_affinities(x, perplexity);

  Embedding2D e;
  e.perplexity = perplexity;
  e.exaggeration_iters = std::min(options.exaggeration_iters, options.iterations);
  e.coords = PointMatrix(x.n, 2);
  for (std::size_t i = 0; i < x.n; ++i) {
    const std::uint64_t key = point_keys.empty() ? i : point_keys[i];
    for (std::size_t k = 0; k < 2; ++k) e.coords.row(i)[k] = options.init_std * counter_normal(options.seed, key, k);
  }

  PointMatrix velocity(x.n, 2), grad(x.n, 2);
  std::vector<double> gains(x.n * 2, 1.0);
  std::vector<double> num;
  e.kl.reserve(options.iterations);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    const bool early = it < e.exaggeration_iters;
    const double z = student_q(e.coords, num);
    gradient_with(aff.p, early ? options.exaggeration : 1.0, e.coords, num, z, grad);
    const double momentum = early ? options.initial_momentum : options.final_momentum;
    for (std::size_t k = 0; k < velocity.values.size(); ++k) {
      if (options.adaptive_gains) {
        const bool opposed = (grad.values[k] > 0.0) != (velocity.values[k] > 0.0);
        gains[k] = std::max(options.min_gain, opposed ? gains[k] + 0.2 : gains[k] * 0.8);
      }
      velocity.values[k] = momentum * velocity.values[k] - options.learning_rate * gains[k] * grad.values[k];
      e.coords.values[k] += velocity.values[k];
    }
    e.kl.push_back(kl_divergence(aff.p, e.coords));
  }
  return e;
}

KlCheck kl_trace_check(const Embedding2D& embedding, std::size_t window, double slack) {
  KlCheck c;
  const auto& kl = embedding.kl;
  for (const double v : kl) {
    if (!std::isfinite(v)) {
      c.passed = false;
      c.worst_increase = std::numeric_limits<double>::infinity();
      return c;
    }
  }
  const std::size_t start = std::min(embedding.exaggeration_iters, kl.size());
  if (window == 0 || kl.size() - start < window) return c;
  double sum = 0.0;
  for (std::size_t k = start; k < start + window; ++k) sum += kl[k];
  double prev = sum / static_cast<double>(window);
  c.windows = 1;
  for (std::size_t end = start + window; end < kl.size(); ++end) {
    sum += kl[end] - kl[end - window];
    const double avg = sum / static_cast<double>(window);
    c.worst_increase = std::max(c.worst_increase, avg - prev);
    if (avg > prev + slack) c.passed = false;
    prev = avg;
    ++c.windows;
  }
  return c;
}

double silhouette_score(const PointMatrix& points, std::span<const int> labels) {
  if (labels.size() != points.n) throw Error("silhouette: label count mismatch");
  const auto d2 = squared_distances(points);
  std::map<int, std::size_t> sizes;
  for (const int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw Error("silhouette: need at least two clusters");
  double total = 0.0;
  for (std::size_t i = 0; i < points.n; ++i) {
    std::map<int, double> sum;
    for (std::size_t j = 0; j < points.n; ++j) {
      if (j != i) sum[labels[j]] += std::sqrt(d2[i * points.n + j]);
    }
    const std::size_t own = sizes[labels[i]];
    if (own <= 1) continue;
    const double a = sum[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, s] : sizes) {
      if (l != labels[i]) b = std::min(b, sum[l] / static_cast<double>(s));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(points.n);
}

void write_scatter_csv(const std::filesystem::path& path, const Embedding2D& embedding,
                       std::span<const std::string> ids, std::span<const std::string> labels) {
  if (ids.size() != embedding.coords.n || labels.size() != embedding.coords.n) {
    throw Error("scatter CSV: id/label count mismatch");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << "subject_id,label,x,y\n";
  char buf[64];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", embedding.coords.row(i)[0], embedding.coords.row(i)[1]);
    f << ids[i] << ',' << labels[i] << ',' << buf << '\n';
  }
}

void write_kl_csv(const std::filesystem::path& path, const Embedding2D& embedding) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << "iter,kl\n";
  char buf[32];
  for (std::size_t i = 0; i < embedding.kl.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", embedding.kl[i]);
    f << i << ',' << buf << '\n';
  }
}

}  // namespace gazeclass
