#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <vector>

#include "gazeclass/grid.hpp"

namespace gazeclass {

struct GazeSample {
  double t_ms = 0.0;
  double x_px = 0.0;
  double y_px = 0.0;
};

// All samples of one subject viewing one image, in time order.
struct GazeSeries {
  std::string subject_id;
  std::string image_id;
  std::vector<GazeSample> samples;
};

// Series sorted by (subject_id, image_id). Throws FormatError naming the line
// for malformed rows, a missing header, or an empty file.
std::vector<GazeSeries> parse_gaze_csv(std::istream& in);
std::vector<GazeSeries> parse_gaze_csv(const std::filesystem::path& path);

void write_gaze_csv(std::ostream& out, std::span<const GazeSeries> series);

struct FixationMap {
  Grid grid;                   // normalized dwell in [0, 1]
  double raw_total_ms = 0.0;   // in-bounds dwell before smoothing
  std::size_t discarded = 0;   // out-of-bounds samples dropped
};

struct HfmParams {
  double sample_rate_hz = 300.0;
  double sigma_px = 24.0;
};

// Raw dwell accumulation: each in-bounds sample adds 1000 / rate ms at its
// nearest pixel.
Grid accumulate_dwell(std::span<const GazeSample> samples, std::size_t width, std::size_t height,
                      double sample_rate_hz, std::size_t* discarded = nullptr);

// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma_px);

// Zero-padded separable Gaussian smoothing.
Grid gaussian_smooth(const Grid& grid, double sigma_px);

FixationMap build_hfm(std::span<const GazeSample> samples, std::size_t width, std::size_t height,
                      const HfmParams& params);

// 16-bit PGM (round(65535 v)) plus a JSON sidecar next to it.
void save_fixation_map(const std::filesystem::path& pgm_path, const FixationMap& map,
                       const std::string& subject_id, const std::string& image_id, double sigma_px);

}  // namespace gazeclass
