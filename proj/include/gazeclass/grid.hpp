#pragma once

#include <cstddef>
#include <vector>

#include "gazeclass/error.hpp"

namespace gazeclass {

// Single-plane row-major 2-D array of doubles.
struct Grid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  std::size_t size() const noexcept { return values.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace gazeclass
