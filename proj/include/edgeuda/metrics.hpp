#pragma once

// Dice overlap, symmetric Hausdorff distance, and per-evaluation reports.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "edgeuda/grid.hpp"
#include "edgeuda/synthdata.hpp"

namespace edgeuda {

using Mask = Grid<std::uint8_t>;

/// 2|P∩T| / (|P|+|T|); 1 when both masks are empty.
inline double dice(const Mask& pred, const Mask& truth) {
  if (!pred.same_dims(truth)) throw ShapeError("dice: mask size mismatch");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.values[i] != 0, b = truth.values[i] != 0;
    p += a, t += b, both += a && b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

namespace detail {

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher); exact on
/// integer inputs.
inline void edt_1d(const double* f, std::size_t n, double* d, std::vector<std::size_t>& v, std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < inf)) continue;
    const double qd = static_cast<double>(q);
    double s;
    while (true) {
      const double vk = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2.0 * qd - 2.0 * vk);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double dv = qd - static_cast<double>(v[k]);
    d[q] = dv * dv + f[v[k]];
  }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
inline std::vector<double> squared_distance_to(const Mask& m) {
  const std::size_t H = m.height, W = m.width;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(H * W), col(H), out(H), row(W), rout(W);
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) col[y] = m(y, x) ? 0.0 : inf;
    edt_1d(col.data(), H, out.data(), v, z);
    for (std::size_t y = 0; y < H; ++y) g[y * W + x] = out[y];
  }
  for (std::size_t y = 0; y < H; ++y) {
    std::copy_n(g.data() + y * W, W, row.data());
    edt_1d(row.data(), W, rout.data(), v, z);
    std::copy_n(rout.data(), W, g.data() + y * W);
  }
  return g;
}

/// Distances from each pixel of `from` to the nearest pixel of `to`.
inline std::vector<double> directed_distances(const Mask& from, const Mask& to) {
  const auto d2 = squared_distance_to(to);
  std::vector<double> out;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from.values[i]) out.push_back(std::sqrt(d2[i]));
  return out;
}

inline double percentile_of(std::vector<double> v, double pct) {
  if (v.empty()) return 0.0;
  if (pct >= 100.0) return *std::max_element(v.begin(), v.end());
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Symmetric Hausdorff distance over pixel centers. 0 when both masks are
/// empty; undefined (nullopt) when exactly one is. `percentile` < 100 gives
/// the robust variant (e.g. 95 for HD95).
inline std::optional<double> hausdorff(const Mask& pred, const Mask& truth, double percentile = 100.0) {
  if (!pred.same_dims(truth)) throw ShapeError("hausdorff: mask size mismatch");
  const bool pe = std::none_of(pred.values.begin(), pred.values.end(), [](auto v) { return v != 0; });
  const bool te = std::none_of(truth.values.begin(), truth.values.end(), [](auto v) { return v != 0; });
  if (pe && te) return 0.0;
  if (pe || te) return std::nullopt;
  return std::max(detail::percentile_of(detail::directed_distances(pred, truth), percentile),
                  detail::percentile_of(detail::directed_distances(truth, pred), percentile));
}

/// Foreground mask of one class, or of every class >= 1 when cls < 0.
inline Mask class_mask(const LabelMap& label, int cls) {
  Mask m(label.height, label.width, 0);
  for (std::size_t i = 0; i < label.size(); ++i)
    m.values[i] = cls < 0 ? label.values[i] != 0 : label.values[i] == cls;
  return m;
}

/// Index 0..2 are classes 1..3, index 3 is the whole tumor (their union).
inline constexpr std::size_t kReportSlots = 4;
inline constexpr std::array<const char*, kReportSlots> kSlotNames = {"c1", "c2", "c3", "whole"};

struct MetricsReport {
  std::array<double, kReportSlots> dice{};
  std::array<double, kReportSlots> hausdorff{};  // mean over defined cases; NaN if none
  std::array<std::size_t, kReportSlots> undefined_hd{};
  std::array<std::size_t, kReportSlots> both_empty{};
  double mean_entropy = 0.0;
  std::size_t samples = 0;

  std::size_t n_undefined_hd() const {
    std::size_t n = 0;
    for (auto v : undefined_hd) n += v;
    return n;
  }
};

struct Prediction {
  std::vector<LabelMap> classes;
  std::vector<double> mean_entropy;  // per sample, pixel-averaged
};

/// Accumulates per-sample metrics in dataset order.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double hd_percentile = 100.0) : pct_(hd_percentile) {}

  void add(const LabelMap& pred, const LabelMap& truth, double entropy) {
    for (std::size_t k = 0; k < kReportSlots; ++k) {
      const int cls = k == 3 ? -1 : static_cast<int>(k) + 1;
      const Mask p = class_mask(pred, cls), t = class_mask(truth, cls);
      dice_[k] += edgeuda::dice(p, t);
      const bool pe = std::none_of(p.values.begin(), p.values.end(), [](auto v) { return v != 0; });
      const bool te = std::none_of(t.values.begin(), t.values.end(), [](auto v) { return v != 0; });
      if (pe && te) ++both_empty_[k];
      if (auto hd = edgeuda::hausdorff(p, t, pct_)) {
        hd_[k] += *hd;
        ++hd_count_[k];
      } else {
        ++undefined_[k];
      }
    }
    entropy_ += entropy;
    ++n_;
  }

  MetricsReport report() const {
    if (n_ == 0) throw DataError("evaluate: empty dataset");
    MetricsReport r;
    const double n = static_cast<double>(n_);
    for (std::size_t k = 0; k < kReportSlots; ++k) {
      r.dice[k] = dice_[k] / n;
      r.hausdorff[k] = hd_count_[k] ? hd_[k] / static_cast<double>(hd_count_[k]) : std::nan("");
      r.undefined_hd[k] = undefined_[k];
      r.both_empty[k] = both_empty_[k];
    }
    r.mean_entropy = entropy_ / n;
    r.samples = n_;
    return r;
  }

 private:
  double pct_;
  std::array<double, kReportSlots> dice_{}, hd_{};
  std::array<std::size_t, kReportSlots> hd_count_{}, undefined_{}, both_empty_{};
  double entropy_ = 0.0;
  std::size_t n_ = 0;
};

/// Runs `predict` over labelled samples in batches and aggregates metrics.
/// `predict` maps an [N,1,H,W] image tensor to a Prediction.
template <class Predictor>
MetricsReport evaluate(const std::vector<Sample>& data, Predictor&& predict, std::size_t batch = 8,
                       double hd_percentile = 100.0) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  MetricsAccumulator acc(hd_percentile);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    std::vector<const FloatMap*> imgs;
    for (std::size_t i = start; i < end; ++i) {
      if (!data[i].label) throw DataError("evaluate: sample without label");
      imgs.push_back(&data[i].image);
    }
    const Prediction pr = predict(stack_maps(imgs));
    for (std::size_t i = start; i < end; ++i)
      acc.add(pr.classes[i - start], *data[i].label, pr.mean_entropy[i - start]);
  }
  return acc.report();
}

inline constexpr const char* kMetricsCsvHeader =
    "epoch,dice_c1,dice_c2,dice_c3,dice_whole,hd_c1,hd_c2,hd_c3,hd_whole,mean_entropy,n_undefined_hd";

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_metrics_row(std::ostream& os, std::size_t epoch, const MetricsReport& r) {
  os << epoch;
  for (double d : r.dice) os << ',' << fmt_num(d);
  for (double h : r.hausdorff) os << ',' << fmt_num(h);
  os << ',' << fmt_num(r.mean_entropy) << ',' << r.n_undefined_hd() << '\n';
}

}  // namespace edgeuda
