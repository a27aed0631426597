#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "vsep/common.hpp"

namespace vsep {

// Dense row-major 2-D grid. Rows index frequency, columns index time frames
// throughout the dsp layer.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}

  T& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

  bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }
  std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
};

using RealGrid = Grid<double>;
using ComplexGrid = Grid<std::complex<double>>;

}  // namespace vsep
