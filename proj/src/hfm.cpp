#include "gazeclass/hfm.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "gazeclass/image_io.hpp"

namespace gazeclass {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

double parse_number(const std::string& field, const char* column, std::size_t line) {
  double v = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (field.empty() || ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw FormatError("gaze CSV line " + std::to_string(line) + ": column " + column +
                      " is not a number: '" + field + "'");
  }
  return v;
}

}  // namespace

std::vector<GazeSeries> parse_gaze_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    const std::vector<std::string> expected = {"subject_id", "image_id", "t_ms", "x_px", "y_px"};
    if (fields != expected) {
      throw FormatError("gaze CSV line " + std::to_string(line_no) +
                        ": missing header subject_id,image_id,t_ms,x_px,y_px");
    }
    have_header = true;
    break;
  }
  if (!have_header) throw FormatError("gaze CSV is empty");

  std::map<std::pair<std::string, std::string>, GazeSeries> groups;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) {
      throw FormatError("gaze CSV line " + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(f.size()));
    }
    if (f[0].empty() || f[1].empty()) {
      throw FormatError("gaze CSV line " + std::to_string(line_no) + ": empty subject or image id");
    }
    GazeSample s{parse_number(f[2], "t_ms", line_no), parse_number(f[3], "x_px", line_no),
                 parse_number(f[4], "y_px", line_no)};
    auto& g = groups[{f[0], f[1]}];
    if (g.samples.empty()) {
      g.subject_id = f[0];
      g.image_id = f[1];
    }
    g.samples.push_back(s);
  }
  std::vector<GazeSeries> out;
  out.reserve(groups.size());
  for (auto& [key, g] : groups) {
    std::stable_sort(g.samples.begin(), g.samples.end(),
                     [](const GazeSample& a, const GazeSample& b) { return a.t_ms < b.t_ms; });
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<GazeSeries> parse_gaze_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  try {
    return parse_gaze_csv(f);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_gaze_csv(std::ostream& out, std::span<const GazeSeries> series) {
  out << "subject_id,image_id,t_ms,x_px,y_px\n";
  char buf[96];
  for (const auto& s : series) {
    for (const auto& g : s.samples) {
      std::snprintf(buf, sizeof buf, ",%.3f,%.2f,%.2f\n", g.t_ms, g.x_px, g.y_px);
      out << s.subject_id << ',' << s.image_id << buf;
    }
  }
}

Grid accumulate_dwell(std::span<const GazeSample> samples, std::size_t width, std::size_t height,
                      double sample_rate_hz, std::size_t* discarded) {
  if (width == 0 || height == 0) throw Error("fixation map dimensions must be positive");
  if (!(sample_rate_hz > 0.0)) throw Error("sample rate must be positive");
  Grid g(width, height);
  const double dwell = 1000.0 / sample_rate_hz;
  std::size_t dropped = 0;
  for (const auto& s : samples) {
    if (!(s.x_px >= 0.0 && s.x_px < static_cast<double>(width) && s.y_px >= 0.0 &&
          s.y_px < static_cast<double>(height))) {
      ++dropped;
      continue;
    }
    const auto col = std::min<std::size_t>(static_cast<std::size_t>(std::lround(s.x_px)), width - 1);
    const auto row = std::min<std::size_t>(static_cast<std::size_t>(std::lround(s.y_px)), height - 1);
    g.at(row, col) += dwell;
  }
  if (discarded) *discarded = dropped;
  return g;
}

std::vector<double> gaussian_kernel(double sigma_px) {
  if (!(sigma_px > 0.0)) throw Error("Gaussian sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma_px));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma_px * sigma_px));
    k[i + radius] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

Grid gaussian_smooth(const Grid& grid, double sigma_px) {
  const auto k = gaussian_kernel(sigma_px);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto w = static_cast<std::ptrdiff_t>(grid.width);
  const auto h = static_cast<std::ptrdiff_t>(grid.height);
  // Rows that are entirely zero contribute nothing; skip them to keep sparse
  // maps cheap.
  Grid tmp(grid.width, grid.height);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    const double* src = &grid.values[y * w];
    double* dst = &tmp.values[y * w];
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const double v = src[x];
      if (v == 0.0) continue;
      const auto lo = std::max<std::ptrdiff_t>(-r, -x);
      const auto hi = std::min<std::ptrdiff_t>(r, w - 1 - x);
      for (std::ptrdiff_t d = lo; d <= hi; ++d) dst[x + d] += v * k[d + r];
    }
  }
  Grid out(grid.width, grid.height);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    const double* src = &tmp.values[y * w];
    bool any = false;
    for (std::ptrdiff_t x = 0; x < w && !any; ++x) any = src[x] != 0.0;
    if (!any) continue;
    const auto lo = std::max<std::ptrdiff_t>(-r, -y);
    const auto hi = std::min<std::ptrdiff_t>(r, h - 1 - y);
    for (std::ptrdiff_t d = lo; d <= hi; ++d) {
      const double kv = k[d + r];
      double* dst = &out.values[(y + d) * w];
      for (std::ptrdiff_t x = 0; x < w; ++x) dst[x] += kv * src[x];
    }
  }
  return out;
}

FixationMap build_hfm(std::span<const GazeSample> samples, std::size_t width, std::size_t height,
                      const HfmParams& params) {
  FixationMap m;
  m.grid = accumulate_dwell(samples, width, height, params.sample_rate_hz, &m.discarded);
  const double dwell = 1000.0 / params.sample_rate_hz;
  m.raw_total_ms = static_cast<double>(samples.size() - m.discarded) * dwell;
  m.grid = gaussian_smooth(m.grid, params.sigma_px);
  const double peak = *std::max_element(m.grid.values.begin(), m.grid.values.end());
  if (peak > 0.0) {
    for (auto& v : m.grid.values) v /= peak;
  }
  return m;
}

void save_fixation_map(const std::filesystem::path& pgm_path, const FixationMap& map,
                       const std::string& subject_id, const std::string& image_id, double sigma_px) {
  GrayImage g{map.grid.width, map.grid.height, 65535, std::vector<std::uint16_t>(map.grid.size())};
  for (std::size_t i = 0; i < map.grid.size(); ++i) {
    g.values[i] = static_cast<std::uint16_t>(std::lround(65535.0 * std::clamp(map.grid.values[i], 0.0, 1.0)));
  }
  write_pgm(pgm_path, g);
  nlohmann::ordered_json j;
  j["subject_id"] = subject_id;
  j["image_id"] = image_id;
  j["raw_total_ms"] = map.raw_total_ms;
  j["sigma_px"] = sigma_px;
  auto sidecar = pgm_path;
  sidecar.replace_extension(".json");
  std::ofstream f(sidecar, std::ios::trunc);
  if (!f) throw Error("cannot open '" + sidecar.string() + "' for writing");
  f << j.dump(2) << "\n";
}

}  // namespace gazeclass
