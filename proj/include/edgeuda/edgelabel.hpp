#pragma once

// Self-supervised semantic edge labels: Canny applied to label maps rendered
// as intensity images, so only class boundaries can respond.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "edgeuda/grid.hpp"

namespace edgeuda {

struct CannyConfig {
  double gaussian_sigma = 1.0;
  int kernel_size = 5;
  double low_threshold = 0.1;   // fraction of the maximum gradient magnitude
  double high_threshold = 0.3;

  void validate() const {
    if (!(gaussian_sigma > 0)) throw ConfigError("canny: sigma must be > 0");
    if (kernel_size < 3 || kernel_size % 2 == 0) throw ConfigError("canny: kernel_size must be odd and >= 3");
    if (!(low_threshold > 0 && low_threshold < high_threshold && high_threshold <= 1))
      throw ConfigError("canny: need 0 < low < high <= 1");
  }
};

/// Class k of C is drawn at intensity k/(C-1).
inline FloatMap render_label_intensity(const LabelMap& label, int classes) {
  if (classes < 2) throw ConfigError("render_label_intensity: need at least 2 classes");
  FloatMap out(label.height, label.width);
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (label.values[i] >= classes) throw DataError("render_label_intensity: label out of range");
    out.values[i] = static_cast<double>(label.values[i]) / static_cast<double>(classes - 1);
  }
  return out;
}

namespace detail {

/// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
  return static_cast<std::size_t>(i);
}

inline FloatMap gaussian_blur(const FloatMap& img, double sigma, int ksize) {
  const int r = ksize / 2;
  std::vector<double> k(static_cast<std::size_t>(ksize));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += (k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= sum;
  FloatMap tmp(img.height, img.width), out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * img(y, reflect(static_cast<std::ptrdiff_t>(x) + i, img.width));
      tmp(y, x) = acc;
    }
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * tmp(reflect(static_cast<std::ptrdiff_t>(y) + i, img.height), x);
      out(y, x) = acc;
    }
  return out;
}

}  // namespace detail

/// Gaussian smoothing, Sobel gradients, 4-direction non-maximum
/// suppression, and 8-connected double-threshold hysteresis. Thresholds are
/// relative to the largest gradient magnitude in the image.
inline EdgeMap canny(const FloatMap& image, const CannyConfig& cfg = {}) {
  cfg.validate();
  const std::size_t H = image.height, W = image.width;
  EdgeMap edges(H, W, 0);
  if (H == 0 || W == 0) return edges;
  for (double v : image.values)
    if (!std::isfinite(v)) throw DataError("canny: non-finite input");

  const FloatMap s = detail::gaussian_blur(image, cfg.gaussian_sigma, cfg.kernel_size);
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) { return s(detail::reflect(y, H), detail::reflect(x, W)); };
  FloatMap mag(H, W);
  Grid<std::uint8_t> dir(H, W);
  double max_mag = 0.0;
  for (std::size_t yy = 0; yy < H; ++yy)
    for (std::size_t xx = 0; xx < W; ++xx) {
      const auto y = static_cast<std::ptrdiff_t>(yy), x = static_cast<std::ptrdiff_t>(xx);
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const double m = std::hypot(gx, gy);
      mag(yy, xx) = m;
      max_mag = std::max(max_mag, m);
      double deg = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      if (deg < 0) deg += 180.0;
      dir(yy, xx) = deg < 22.5 || deg >= 157.5 ? 0 : deg < 67.5 ? 1 : deg < 112.5 ? 2 : 3;
    }
  // Relative to the image's own dynamic range; a rendered constant label
  // map only carries rounding noise.
  if (max_mag < 1e-9) return edges;

  // Plateau ties (both sides of a step) are kept; the tolerance absorbs
  // rounding so the result does not depend on the image's orientation.
  const double tie = 1e-9 * max_mag;
  static constexpr int kOff[4][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1}};  // (dy, dx) per direction
  auto mag_or_zero = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(H) || x >= static_cast<std::ptrdiff_t>(W)) return 0.0;
    return mag(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  FloatMap thin(H, W, 0.0);
  for (std::size_t yy = 0; yy < H; ++yy)
    for (std::size_t xx = 0; xx < W; ++xx) {
      const double m = mag(yy, xx);
      if (m <= tie) continue;
      const auto y = static_cast<std::ptrdiff_t>(yy), x = static_cast<std::ptrdiff_t>(xx);
      const auto [dy, dx] = kOff[dir(yy, xx)];
      if (m + tie >= mag_or_zero(y + dy, x + dx) && m + tie >= mag_or_zero(y - dy, x - dx)) thin(yy, xx) = m;
    }

  const double high = cfg.high_threshold * max_mag - tie, low = cfg.low_threshold * max_mag - tie;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < thin.size(); ++i)
    if (thin.values[i] >= high) {
      edges.values[i] = 1;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const auto y = static_cast<std::ptrdiff_t>(i / W), x = static_cast<std::ptrdiff_t>(i % W);
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        const auto ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(H) || nx >= static_cast<std::ptrdiff_t>(W)) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx);
        if (!edges.values[j] && thin.values[j] >= low) {
          edges.values[j] = 1;
          stack.push_back(j);
        }
      }
  }
  return edges;
}

/// Semantic edge label of one class map.
inline EdgeMap edge_label(const LabelMap& label, int classes, const CannyConfig& cfg = {}) {
  return canny(render_label_intensity(label, classes), cfg);
}

inline std::vector<EdgeMap> edge_labels_for_batch(const std::vector<LabelMap>& labels, int classes,
                                                  const CannyConfig& cfg = {}) {
  std::vector<EdgeMap> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(edge_label(l, classes, cfg));
  return out;
}

}  // namespace edgeuda
