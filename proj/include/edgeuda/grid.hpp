#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "edgeuda/tensor.hpp"

namespace edgeuda {

/// Row-major 2-D map.
template <class T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  T& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  bool same_dims(const auto& o) const { return height == o.height && width == o.width; }
  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<std::uint8_t>;
using FloatMap = Grid<double>;
using EdgeMap = Grid<std::uint8_t>;  // values in {0,1}

/// Counter-clockwise rotation by 90 degrees, `turns` times.
template <class T>
Grid<T> rot90(const Grid<T>& g, int turns = 1) {
  turns = ((turns % 4) + 4) % 4;
  Grid<T> cur = g;
  for (int t = 0; t < turns; ++t) {
    Grid<T> next(cur.width, cur.height);
    for (std::size_t y = 0; y < cur.height; ++y)
      for (std::size_t x = 0; x < cur.width; ++x) next(cur.width - 1 - x, y) = cur(y, x);
    cur = std::move(next);
  }
  return cur;
}

/// Stack same-sized maps into an [N,1,H,W] tensor.
template <class T>
Tensor stack_maps(const std::vector<const Grid<T>*>& maps) {
  if (maps.empty()) throw ShapeError("stack_maps: empty batch");
  const std::size_t h = maps[0]->height, w = maps[0]->width;
  std::vector<double> data;
  data.reserve(maps.size() * h * w);
  for (const auto* m : maps) {
    if (m->height != h || m->width != w) throw ShapeError("stack_maps: mixed map sizes");
    for (const auto& v : m->values) data.push_back(static_cast<double>(v));
  }
  return Tensor(Shape{maps.size(), 1, h, w}, std::move(data));
}

}  // namespace edgeuda
