#pragma once

#include <array>
#include <cstddef>
#include <utility>

#include "gazeclass/grid.hpp"

namespace gazeclass {

inline constexpr std::size_t kResizeSize = 256;
inline constexpr std::size_t kCropSize = 224;
inline constexpr std::size_t kVariants = 10;

// (row, col) offsets of the five crops: four corners, then center.
inline constexpr std::array<std::pair<std::size_t, std::size_t>, 5> kCropOffsets = {{
    {0, 0}, {0, 32}, {32, 0}, {32, 32}, {16, 16},
}};

// Half-pixel-centered bilinear resampling, edge-clamped. Aspect ratio is not
// preserved.
Grid resize_bilinear(const Grid& grid, std::size_t out_w, std::size_t out_h);

Grid crop(const Grid& grid, std::size_t row, std::size_t col, std::size_t w, std::size_t h);
std::array<Grid, 5> crop_five(const Grid& grid256);
Grid hflip(const Grid& grid);

// Variants 0-4 are the crops in kCropOffsets order; 5-9 their mirrors.
std::array<Grid, kVariants> augment10(const Grid& grid256);

// Single variant without materializing the other nine.
Grid augment_variant(const Grid& grid256, std::size_t variant);

}  // namespace gazeclass
