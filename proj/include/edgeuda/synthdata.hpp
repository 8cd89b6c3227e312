#pragma once

// Synthetic cross-modality phantoms: one label anatomy rendered under two
// appearance models whose tissue-intensity orderings are reversed, plus
// intensity normalization, joint augmentation, and unpaired batch sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "edgeuda/edgelabel.hpp"
#include "edgeuda/grid.hpp"
#include "edgeuda/pgm.hpp"

namespace edgeuda {

inline constexpr int kNumClasses = 4;  // background, core, enhancing, edema
// Minimum width in pixels of each nested tumor ring.
inline constexpr double kMinRingWidth = 4.0;

/// splitmix64 finalizer; derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto step = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return step(step(step(a) ^ b) ^ c);
}

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

struct Phantom {
  LabelMap label;     // 0 background, 1 core, 2 enhancing, 3 edema
  Grid<std::uint8_t> brain;  // tissue support; outside is air
  std::uint64_t seed = 0;
  bool has_tumor = false;
  // Bounding box of the tumor complex, half-open.
  std::size_t box_y0 = 0, box_y1 = 0, box_x0 = 0, box_x1 = 0;
};

namespace detail {

struct Ellipse {
  double cy, cx, ay, ax, theta;
  bool contains(double y, double x) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double dy = y - cy, dx = x - cx;
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    if (ax <= 0 || ay <= 0) return false;
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
  }
};

/// True if `inner` grown by `gap` still fits inside `outer` (checked on a
/// ring of boundary samples).
inline bool fits_with_gap(const Ellipse& outer, const Ellipse& inner, double gap) {
  const double c = std::cos(inner.theta), s = std::sin(inner.theta);
  for (int i = 0; i < 72; ++i) {
    const double t = i * std::numbers::pi / 36;
    const double u = inner.ax * std::cos(t), v = inner.ay * std::sin(t);
    const double y = inner.cy + s * u + c * v, x = inner.cx + c * u - s * v;
    for (int j = 0; j < 8; ++j) {
      const double a = j * std::numbers::pi / 4;
      if (!outer.contains(y + gap * std::sin(a), x + gap * std::cos(a))) return false;
    }
  }
  return true;
}

/// Draws a nested ellipse at relative scale [k_lo,k_hi] of `outer`, leaving
/// at least `gap` pixels of the outer region all around. Falls back to a
/// concentric copy shrunk by `gap`, or an empty ellipse if that is thinner
/// than `gap` itself.
template <class Uni>
Ellipse nested_ellipse(const Ellipse& outer, double k_lo, double k_hi, double gap, Uni& uni) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double k = uni(k_lo, k_hi);
    const Ellipse e{outer.cy + uni(-0.15, 0.15) * outer.ay, outer.cx + uni(-0.15, 0.15) * outer.ax, k * outer.ay,
                    k * outer.ax, outer.theta + uni(-0.3, 0.3)};
    if (fits_with_gap(outer, e, gap)) return e;
  }
  if (std::min(outer.ay, outer.ax) < 2 * gap) return Ellipse{outer.cy, outer.cx, 0.0, 0.0, outer.theta};
  return Ellipse{outer.cy, outer.cx, outer.ay - gap, outer.ax - gap, outer.theta};
}

}  // namespace detail

/// Random elliptic "brain" carrying, with probability `tumor_probability`,
/// a nested tumor complex: edema contains core, core contains enhancing.
inline Phantom generate_phantom(std::uint64_t seed, std::size_t H, std::size_t W, double tumor_probability = 0.9) {
  if (H < 32 || W < 32 || H % 8 != 0 || W % 8 != 0)
    throw ConfigError("generate_phantom: dims must be >= 32 and divisible by 8");
  std::mt19937_64 rng(mix_seed(seed, 0x7068616e746f6dull));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const double h = static_cast<double>(H), w = static_cast<double>(W);

  Phantom ph;
  ph.seed = seed;
  ph.label = LabelMap(H, W, 0);
  ph.brain = Grid<std::uint8_t>(H, W, 0);
  const detail::Ellipse brain{h / 2 + uni(-0.04, 0.04) * h, w / 2 + uni(-0.04, 0.04) * w, uni(0.36, 0.44) * h,
                              uni(0.36, 0.44) * w, uni(0.0, std::numbers::pi)};
  const bool tumor = u01(rng) < tumor_probability;
  const double m = std::min(h, w);
  // Tumor center lies well inside the brain so the complex stays within it.
  const double rr = std::sqrt(uni(0.0, 1.0)) * 0.3, phi = uni(0.0, 2 * std::numbers::pi);
  const detail::Ellipse edema{brain.cy + rr * brain.ay * std::sin(phi), brain.cx + rr * brain.ax * std::cos(phi),
                              uni(0.18, 0.28) * m, uni(0.18, 0.28) * m, uni(0.0, std::numbers::pi)};
  // Nested boundaries closer than a few pixels blur into one edge.
  const double gap = kMinRingWidth;
  const detail::Ellipse core = detail::nested_ellipse(edema, 0.6, 0.8, gap, uni);
  const detail::Ellipse enh = detail::nested_ellipse(core, 0.55, 0.8, gap, uni);

  ph.box_y0 = H, ph.box_x0 = W;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      if (!brain.contains(py, px)) continue;
      ph.brain(y, x) = 1;
      if (!tumor || !edema.contains(py, px)) continue;
      std::uint8_t c = 3;
      if (core.contains(py, px)) c = enh.contains(py, px) ? 2 : 1;
      ph.label(y, x) = c;
      ph.has_tumor = true;
      ph.box_y0 = std::min(ph.box_y0, y), ph.box_y1 = std::max(ph.box_y1, y + 1);
      ph.box_x0 = std::min(ph.box_x0, x), ph.box_x1 = std::max(ph.box_x1, x + 1);
    }
  if (!ph.has_tumor) ph.box_y0 = ph.box_x0 = 0;
  return ph;
}

/// Appearance of one synthetic modality. Tissue class c >= 1 has mean
/// brain_mean + contrast_sign[c] * contrast[c]; class 0 is brain inside the
/// support and air outside.
struct ModalityModel {
  double air_mean = 0.0;
  double brain_mean = 0.3;
  std::array<double, kNumClasses> contrast = {0.0, 0.4, 0.2, 0.7};
  std::array<double, kNumClasses> contrast_sign = {0.0, 1.0, 1.0, 1.0};
  double noise_std = 0.03;
  double bias_amplitude = 0.1;

  double class_mean(int c) const { return brain_mean + contrast_sign[c] * contrast[c]; }
};

/// Source appearance: brain < enhancing < core < edema.
inline ModalityModel source_modality() { return ModalityModel{}; }

/// Target appearance with the tissue ordering reversed:
/// edema < core < enhancing < brain.
inline ModalityModel target_modality() {
  ModalityModel m;
  m.brain_mean = 1.0;
  m.contrast = {0.0, 0.5, 0.15, 0.75};
  m.contrast_sign = {0.0, -1.0, -1.0, -1.0};
  return m;
}

/// Affine map of [min,max] onto [-1,1]; a constant image maps to zeros.
inline FloatMap normalize_intensity(const FloatMap& img) {
  FloatMap out(img.height, img.width, 0.0);
  if (img.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) return out;
  for (std::size_t i = 0; i < img.size(); ++i) out.values[i] = (img.values[i] - a) / (b - a) * 2.0 - 1.0;
  return out;
}

/// Class means times a smooth multiplicative bias field, plus Gaussian
/// noise, normalized to [-1,1].
inline FloatMap render(const Phantom& ph, const ModalityModel& mod, std::uint64_t seed) {
  const std::size_t H = ph.label.height, W = ph.label.width;
  std::mt19937_64 rng(mix_seed(seed, 0x72656e646572ull));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double fy = 0.3 + 0.7 * u01(rng), fx = 0.3 + 0.7 * u01(rng), phase = 2 * std::numbers::pi * u01(rng);
  FloatMap img(H, W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double base = ph.brain(y, x) ? mod.class_mean(ph.label(y, x)) : mod.air_mean;
      const double bias = 1.0 + mod.bias_amplitude *
                                    std::cos(2 * std::numbers::pi * (fy * static_cast<double>(y) / static_cast<double>(H) +
                                                                     fx * static_cast<double>(x) / static_cast<double>(W)) +
                                             phase);
      img(y, x) = base * bias + (mod.noise_std > 0 ? mod.noise_std * noise(rng) : 0.0);
    }
  return normalize_intensity(img);
}

struct Sample {
  FloatMap image;                // [-1,1]
  std::optional<LabelMap> label;  // present for labelled data only
  std::optional<EdgeMap> edge;
  Domain domain = Domain::source;
};

/// Rotation by quarter turns after a reflect-padded translation; the
/// translation is a crop of the (H-4)x(W-4) window at the given offset,
/// padded back by reflection. Offset 0 and 0 turns is the identity.
struct AugmentParams {
  int quarter_turns = 0;  // 0..3
  int dy = 0, dx = 0;     // -2..2
};

template <class T>
Grid<T> apply_augment(const Grid<T>& g, const AugmentParams& p) {
  Grid<T> shifted(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x)
      shifted(y, x) = g(detail::reflect(static_cast<std::ptrdiff_t>(y) + p.dy, g.height),
                        detail::reflect(static_cast<std::ptrdiff_t>(x) + p.dx, g.width));
  return rot90(shifted, p.quarter_turns);
}

inline AugmentParams draw_augment(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x6175676dull));
  std::uniform_int_distribution<int> turns(0, 3), off(-2, 2);
  AugmentParams p;
  p.quarter_turns = turns(rng);
  p.dy = off(rng);
  p.dx = off(rng);
  return p;
}

/// Same geometric transform on image, label, and edge map.
inline Sample augment(const Sample& s, const AugmentParams& p) {
  Sample out;
  out.domain = s.domain;
  out.image = apply_augment(s.image, p);
  if (s.label) out.label = apply_augment(*s.label, p);
  if (s.edge) out.edge = apply_augment(*s.edge, p);
  return out;
}

inline Sample augment(const Sample& s, std::uint64_t seed) { return augment(s, draw_augment(seed)); }

struct SyntheticConfig {
  std::size_t image_size = 64;
  double tumor_probability = 0.9;
  ModalityModel source = source_modality();
  ModalityModel target = target_modality();
  CannyConfig canny;
};

/// One rendered phantom. Labels (and the derived edge map) are attached
/// when `labelled`; target-domain training data is unlabelled.
inline Sample make_sample(const SyntheticConfig& cfg, Domain domain, std::uint64_t phantom_seed, bool labelled) {
  const Phantom ph = generate_phantom(phantom_seed, cfg.image_size, cfg.image_size, cfg.tumor_probability);
  Sample s;
  s.domain = domain;
  s.image = render(ph, domain == Domain::source ? cfg.source : cfg.target, mix_seed(phantom_seed, 0xabcd));
  if (labelled) {
    s.label = ph.label;
    s.edge = edge_label(ph.label, kNumClasses, cfg.canny);
  }
  return s;
}

/// Roles of the independent phantom streams drawn from one seed.
enum class Split : std::uint64_t { train_source = 1, train_target = 2, eval_source = 3, eval_target = 4 };

inline std::vector<Sample> make_split(const SyntheticConfig& cfg, Split split, std::size_t count, std::uint64_t seed) {
  const Domain d = (split == Split::train_source || split == Split::eval_source) ? Domain::source : Domain::target;
  const bool labelled = split != Split::train_target;
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(make_sample(cfg, d, mix_seed(seed, static_cast<std::uint64_t>(split), i), labelled));
  return out;
}

/// Stacked batch tensors. Labels and edges are empty for target batches.
struct Batch {
  Tensor images;                     // [N,1,H,W]
  std::vector<std::uint8_t> labels;  // [N,H,W]
  std::vector<double> edges;         // [N,H,W] in {0,1}
};

inline Batch make_batch(const std::vector<Sample>& samples) {
  Batch b;
  std::vector<const FloatMap*> imgs;
  for (const auto& s : samples) imgs.push_back(&s.image);
  b.images = stack_maps(imgs);
  const bool labelled = std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return s.label && s.edge; });
  if (labelled)
    for (const auto& s : samples) {
      b.labels.insert(b.labels.end(), s.label->values.begin(), s.label->values.end());
      for (auto e : s.edge->values) b.edges.push_back(e ? 1.0 : 0.0);
    }
  return b;
}

/// Independent draws (with augmentation) from a labelled source pool and an
/// unlabelled target pool. Batch k is a pure function of (seed, k).
class UnpairedSampler {
 public:
  UnpairedSampler(const std::vector<Sample>& source, const std::vector<Sample>& target, std::size_t batch,
                  std::uint64_t seed, bool augment_data = true)
      : source_(&source), target_(&target), batch_(batch), seed_(seed), augment_(augment_data) {
    if (batch == 0) throw ConfigError("unpaired_batches: batch must be >= 1");
    if (source.empty() || target.empty()) throw DataError("unpaired_batches: empty pool");
  }

  std::pair<Batch, Batch> at(std::uint64_t step) const {
    return {draw(*source_, mix_seed(seed_, step, 0x5352), true), draw(*target_, mix_seed(seed_, step, 0x5447), false)};
  }

 private:
  Batch draw(const std::vector<Sample>& pool, std::uint64_t seed, bool keep_labels) const {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<Sample> items;
    for (std::size_t i = 0; i < batch_; ++i) {
      const auto& src = pool[pick(rng)];
      Sample s = augment_ ? augment(src, mix_seed(seed, i)) : src;
      if (!keep_labels) {
        s.label.reset();
        s.edge.reset();
      }
      items.push_back(std::move(s));
    }
    return make_batch(items);
  }

  const std::vector<Sample>* source_;
  const std::vector<Sample>* target_;
  std::size_t batch_;
  std::uint64_t seed_;
  bool augment_;
};

inline std::pair<Batch, Batch> unpaired_batches(const std::vector<Sample>& source, const std::vector<Sample>& target,
                                                std::size_t batch, std::uint64_t seed) {
  return UnpairedSampler(source, target, batch, seed).at(0);
}

// ---------------------------------------------------------------------------
// On-disk datasets
//
//   DIR/dataset.lst       one line per sample: "images/NAME.pgm [labels/NAME.pgm]"
//   DIR/images/NAME.pgm   16-bit P5 image
//   DIR/labels/NAME.pgm   8-bit P5, gray level = class index
//   DIR/edges/NAME.pgm    8-bit P5, 255 = edge (written, not read back)

inline void export_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "labels", "edges"}) fs::create_directories(dir / sub, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream lst(dir / "dataset.lst");
  if (!lst) throw DataError("cannot write " + (dir / "dataset.lst").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.pgm", i);
    const auto& s = samples[i];
    write_pgm((dir / "images" / name).string(), image_to_pgm(s.image));
    lst << "images/" << name;
    if (s.label) {
      write_pgm((dir / "labels" / name).string(), labels_to_pgm(*s.label));
      lst << " labels/" << name;
    }
    if (s.edge) write_pgm((dir / "edges" / name).string(), edges_to_pgm(*s.edge));
    lst << '\n';
  }
}

/// Reads `dataset.lst` if present, else every DIR/images/*.pgm with an
/// optional same-named DIR/labels/*.pgm. Labelled items become source
/// samples, unlabelled ones target samples.
inline std::vector<Sample> load_pgm_dataset(const std::filesystem::path& dir, int classes = kNumClasses,
                                            const CannyConfig& canny_cfg = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::vector<std::pair<fs::path, std::optional<fs::path>>> items;
  if (fs::exists(dir / "dataset.lst")) {
    std::ifstream lst(dir / "dataset.lst");
    std::string line;
    while (std::getline(lst, line)) {
      std::istringstream ls(line);
      std::string img, lab;
      if (!(ls >> img)) continue;
      items.emplace_back(dir / img, ls >> lab ? std::optional<fs::path>(dir / lab) : std::nullopt);
    }
  } else {
    if (!fs::is_directory(dir / "images")) throw DataError("no dataset.lst or images/ in " + dir.string());
    std::vector<fs::path> imgs;
    for (const auto& e : fs::directory_iterator(dir / "images"))
      if (e.path().extension() == ".pgm") imgs.push_back(e.path());
    std::sort(imgs.begin(), imgs.end());
    for (const auto& p : imgs) {
      const auto lab = dir / "labels" / p.filename();
      items.emplace_back(p, fs::exists(lab) ? std::optional<fs::path>(lab) : std::nullopt);
    }
  }
  std::vector<Sample> out;
  for (const auto& [ip, lp] : items) {
    const PgmImage img = read_pgm(ip.string());
    Sample s;
    FloatMap raw(img.pixels.height, img.pixels.width);
    for (std::size_t i = 0; i < raw.size(); ++i) raw.values[i] = img.pixels.values[i];
    s.image = normalize_intensity(raw);
    s.domain = Domain::target;
    if (lp) {
      LabelMap label = pgm_to_labels(read_pgm(lp->string()));
      if (!label.same_dims(s.image)) throw DataError("label/image size mismatch for " + ip.string());
      for (auto v : label.values)
        if (v >= classes) throw DataError("label value " + std::to_string(v) + " out of range in " + lp->string());
      s.edge = edge_label(label, classes, canny_cfg);
      s.label = std::move(label);
      s.domain = Domain::source;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace edgeuda
