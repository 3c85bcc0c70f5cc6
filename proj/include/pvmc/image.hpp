#pragma once

#include <cstddef>
#include <vector>

#include "pvmc/errors.hpp"

namespace pvmc {

/// Dense row-major 2-D grid.
template <class T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> v;

  Grid() = default;
  Grid(int w, int h, T fill = T(0))
      : width(w), height(h), v(static_cast<std::size_t>(w) * h, fill) {}

  T& at(int y, int x) { return v[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int y, int x) const {
    return v[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const { return v.size(); }

  bool same_dims(const Grid& other) const {
    return width == other.width && height == other.height;
  }
};

using ImageD = Grid<double>;
using ImageF = Grid<float>;

template <class T, class U>
Grid<T> grid_cast(const Grid<U>& g) {
  Grid<T> out(g.width, g.height);
  for (std::size_t i = 0; i < g.v.size(); ++i) out.v[i] = static_cast<T>(g.v[i]);
  return out;
}

template <class T>
double grid_max(const Grid<T>& g) {
  double m = 0.0;
  bool first = true;
  for (const T x : g.v) {
    if (first || static_cast<double>(x) > m) m = static_cast<double>(x);
    first = false;
  }
  return m;
}

template <class T>
double grid_mean(const Grid<T>& g) {
  if (g.v.empty()) throw ModelError("grid_mean: empty grid");
  double s = 0.0;
  for (const T x : g.v) s += static_cast<double>(x);
  return s / static_cast<double>(g.v.size());
}

}  // namespace pvmc
