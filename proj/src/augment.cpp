#include "gazeclass/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gazeclass {

Grid resize_bilinear(const Grid& grid, std::size_t out_w, std::size_t out_h) {
  if (grid.width < 2 || grid.height < 2) throw Error("resize_bilinear: input must be at least 2x2");
  if (out_w == 0 || out_h == 0) throw Error("resize_bilinear: output size must be positive");
  if (out_w == grid.width && out_h == grid.height) return grid;

  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src =
          std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      t[i] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto xs = taps(grid.width, out_w);
  const auto ys = taps(grid.height, out_h);
  Grid out(out_w, out_h);
  for (std::size_t r = 0; r < out_h; ++r) {
    const auto& ty = ys[r];
    for (std::size_t c = 0; c < out_w; ++c) {
      const auto& tx = xs[c];
      const double top = grid.at(ty.i0, tx.i0) * (1.0 - tx.f) + grid.at(ty.i0, tx.i1) * tx.f;
      const double bot = grid.at(ty.i1, tx.i0) * (1.0 - tx.f) + grid.at(ty.i1, tx.i1) * tx.f;
      out.at(r, c) = top * (1.0 - ty.f) + bot * ty.f;
    }
  }
  return out;
}

Grid crop(const Grid& grid, std::size_t row, std::size_t col, std::size_t w, std::size_t h) {
  if (row + h > grid.height || col + w > grid.width) throw Error("crop: window outside the grid");
  Grid out(w, h);
  for (std::size_t r = 0; r < h; ++r) {
    const auto* src = &grid.values[(row + r) * grid.width + col];
    std::copy(src, src + w, &out.values[r * w]);
  }
  return out;
}

namespace {

void check_256(const Grid& g, const char* who) {
  if (g.width != kResizeSize || g.height != kResizeSize) {
    throw Error(std::string(who) + ": expected a 256x256 grid, got " + std::to_string(g.width) +
                "x" + std::to_string(g.height));
  }
}

}  // namespace

std::array<Grid, 5> crop_five(const Grid& grid256) {
  check_256(grid256, "crop_five");
  std::array<Grid, 5> out;
  for (std::size_t i = 0; i < 5; ++i) {
    out[i] = crop(grid256, kCropOffsets[i].first, kCropOffsets[i].second, kCropSize, kCropSize);
  }
  return out;
}

Grid hflip(const Grid& grid) {
  Grid out(grid.width, grid.height);
  for (std::size_t r = 0; r < grid.height; ++r) {
    for (std::size_t c = 0; c < grid.width; ++c) out.at(r, c) = grid.at(r, grid.width - 1 - c);
  }
  return out;
}

std::array<Grid, kVariants> augment10(const Grid& grid256) {
  auto crops = crop_five(grid256);
  std::array<Grid, kVariants> out;
  for (std::size_t i = 0; i < 5; ++i) {
    out[i + 5] = hflip(crops[i]);
    out[i] = std::move(crops[i]);
  }
  return out;
}

Grid augment_variant(const Grid& grid256, std::size_t variant) {
  check_256(grid256, "augment_variant");
  if (variant >= kVariants) throw Error("augment_variant: variant must be in 0..9");
  const auto [row, col] = kCropOffsets[variant % 5];
  auto c = crop(grid256, row, col, kCropSize, kCropSize);
  return variant < 5 ? c : hflip(c);
}

}  // namespace gazeclass
