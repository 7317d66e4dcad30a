#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gazeclass/grid.hpp"

namespace gazeclass {

// 8-bit RGB stimulus, interleaved row-major.
struct StimulusImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  static constexpr std::size_t channels = 3;
  std::uint8_t at(std::size_t row, std::size_t col, std::size_t ch) const {
    return rgb[(row * width + col) * 3 + ch];
  }
  friend bool operator==(const StimulusImage&, const StimulusImage&) = default;
};

// Binary netpbm. P6 is read as RGB; P5 (8 or 16 bit) is replicated to RGB
// after scaling to 8 bit.
StimulusImage read_stimulus(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const StimulusImage& image);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> values;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

// One color plane scaled to [0, 1].
Grid image_plane(const StimulusImage& image, std::size_t channel);

}  // namespace gazeclass
