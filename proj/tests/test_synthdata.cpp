#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <unistd.h>

#include "edgeuda/losses.hpp"
#include "edgeuda/synthdata.hpp"

namespace edgeuda {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("edgeuda_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Phantom, Deterministic) {
  const Phantom a = generate_phantom(17, 64, 64), b = generate_phantom(17, 64, 64);
  EXPECT_EQ(a.label, b.label);
  EXPECT_EQ(a.brain, b.brain);
  EXPECT_NE(generate_phantom(18, 64, 64).label, a.label);
  EXPECT_THROW(generate_phantom(1, 24, 24), ConfigError);
  EXPECT_THROW(generate_phantom(1, 36, 36), ConfigError);
}

TEST(Phantom, ClassFrequenciesAndStructure) {
  std::array<std::size_t, 4> counts{};
  std::size_t total = 0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const Phantom ph = generate_phantom(s, 64, 64);
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        const auto c = ph.label(y, x);
        ASSERT_LT(c, 4);
        ++counts[c];
        if (c != 0) {
          ASSERT_TRUE(ph.brain(y, x));
          ASSERT_TRUE(y >= ph.box_y0 && y < ph.box_y1 && x >= ph.box_x0 && x < ph.box_x1);
        }
      }
    total += 64 * 64;
  }
  for (int c = 0; c < 4; ++c) EXPECT_GT(static_cast<double>(counts[c]) / total, 0.01) << "class " << c;
}

// Class 3 surrounds the core: no core or enhancing pixel touches
// background directly.
TEST(Phantom, EdemaSurroundsCore) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Phantom ph = generate_phantom(s, 64, 64);
    for (std::size_t y = 1; y + 1 < 64; ++y)
      for (std::size_t x = 1; x + 1 < 64; ++x) {
        if (ph.label(y, x) != 1 && ph.label(y, x) != 2) continue;
        for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}})
          EXPECT_NE(ph.label(y + dy, x + dx), 0) << "seed " << s;
      }
  }
}

TEST(Render, RangeAndPiecewiseConstant) {
  const Phantom ph = generate_phantom(5, 64, 64);
  ModalityModel clean = source_modality();
  clean.noise_std = 0;
  clean.bias_amplitude = 0;
  FloatMap img = render(ph, clean, 1);
  // Distinct raw means map affinely, so each class sees exactly one value.
  std::map<int, std::set<double>> per_class;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const int key = ph.brain.values[i] ? ph.label.values[i] : -1;
    per_class[key].insert(img.values[i]);
  }
  for (const auto& [k, vals] : per_class) EXPECT_EQ(vals.size(), 1u) << "class " << k;
  for (std::uint64_t s = 0; s < 20; ++s) {
    FloatMap r = render(generate_phantom(s, 64, 64), target_modality(), s);
    for (double v : r.values) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Render, ModalitiesDifferPerClassAndInOrdering) {
  const ModalityModel s = source_modality(), t = target_modality();
  std::vector<int> os = {0, 1, 2, 3}, ot = os;
  std::sort(os.begin(), os.end(), [&](int a, int b) { return s.class_mean(a) < s.class_mean(b); });
  std::sort(ot.begin(), ot.end(), [&](int a, int b) { return t.class_mean(a) < t.class_mean(b); });
  EXPECT_NE(os, ot);

  int measured = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Phantom ph = generate_phantom(seed, 64, 64);
    if (!ph.has_tumor) continue;
    const FloatMap a = render(ph, s, seed), b = render(ph, t, seed);
    for (int c = 0; c < 4; ++c) {
      double sa = 0, sb = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (ph.brain.values[i] && ph.label.values[i] == c) sa += a.values[i], sb += b.values[i], ++n;
      if (n < 5) continue;
      EXPECT_GE(std::abs(sa / n - sb / n), 0.3) << "seed " << seed << " class " << c;
      ++measured;
    }
  }
  EXPECT_GT(measured, 40);
}

// A two-layer probe on intensity histograms separates the domains.
TEST(Render, DomainProbeSeparates) {
  const std::size_t bins = 16;
  auto features = [&](const FloatMap& img) {
    std::vector<double> h(bins, 0.0);
    for (double v : img.values) h[std::min(bins - 1, static_cast<std::size_t>((v + 1.0) / 2.0 * bins))] += 1.0;
    for (double& x : h) x /= static_cast<double>(img.size()) / bins;
    return h;
  };
  auto dataset = [&](std::uint64_t base, std::size_t n) {
    std::vector<double> x;
    std::vector<double> y;
    for (std::size_t i = 0; i < n; ++i) {
      const bool tgt = i % 2;
      const Phantom ph = generate_phantom(base + i, 32, 32);
      auto f = features(render(ph, tgt ? target_modality() : source_modality(), base + i));
      x.insert(x.end(), f.begin(), f.end());
      y.push_back(tgt);
    }
    return std::pair{Tensor(Shape{n, bins}, std::move(x)), y};
  };
  auto [xtr, ytr] = dataset(0, 200);
  auto [xte, yte] = dataset(100000, 200);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  auto init = [&](Shape s) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) v = u(rng);
    return Tensor(std::move(s), std::move(d), true);
  };
  Tensor w1 = init({8, bins}), b1(Shape{8}, 0.0, true), w2 = init({1, 8}), b2(Shape{1}, 0.0, true);
  std::vector<std::vector<double>> vel(4);
  auto logits = [&](Tape& t, const Tensor& x) { return linear(t, relu(t, linear(t, x, w1, b1)), w2, b2); };
  for (int epoch = 0; epoch < 300; ++epoch) {
    Tape t;
    Tensor z = logits(t, xtr);
    // Signed margin: target logits pushed up, source logits down.
    std::vector<double> sign(ytr.size());
    for (std::size_t i = 0; i < ytr.size(); ++i) sign[i] = ytr[i] == 1 ? 1.0 : -1.0;
    Tensor margin = mul(t, reshape(t, z, Shape{z.numel()}), Tensor(Shape{sign.size()}, sign));
    Tensor loss = adversarial_generator_term(t, reshape(t, margin, Shape{sign.size(), 1}));
    t.backward(loss);
    Tensor* ps[] = {&w1, &b1, &w2, &b2};
    for (int k = 0; k < 4; ++k) {
      sgd_momentum_step(*ps[k], vel[k], 0.05, 0.9);
      ps[k]->zero_grad();
    }
  }
  Tape off = Tape::disabled();
  Tensor z = logits(off, xte);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < yte.size(); ++i) correct += (z[i] > 0) == (yte[i] == 1);
  EXPECT_GT(static_cast<double>(correct) / yte.size(), 0.9);
}

TEST(Render, LabelStatisticsMatchAcrossDomains) {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  const auto a = make_split(cfg, Split::eval_source, 400, 1);
  const auto b = make_split(cfg, Split::eval_target, 400, 1);
  std::array<double, 4> fa{}, fb{};
  for (const auto& s : a)
    for (auto v : s.label->values) fa[v] += 1;
  for (const auto& s : b)
    for (auto v : s.label->values) fb[v] += 1;
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(fa[c] / (400 * 1024), fb[c] / (400 * 1024), 0.01) << "class " << c;
}

TEST(Normalize, Examples) {
  FloatMap m(1, 3);
  m.values = {0, 5, 10};
  FloatMap n = normalize_intensity(m);
  EXPECT_EQ(n.values[0], -1.0);
  EXPECT_EQ(n.values[2], 1.0);
  EXPECT_EQ(n.values[1], 0.0);
  FloatMap again = normalize_intensity(n);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(again.values[i], n.values[i], 1e-12);
  EXPECT_EQ(normalize_intensity(FloatMap(2, 2, 3.3)).values, std::vector<double>(4, 0.0));
}

TEST(Augment, IdentityAndJointTransform) {
  SyntheticConfig cfg;
  const Sample s = make_sample(cfg, Domain::source, 9, true);
  const Sample same = augment(s, AugmentParams{});
  EXPECT_EQ(same.image, s.image);
  EXPECT_EQ(same.label, s.label);
  EXPECT_EQ(same.edge, s.edge);

  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const AugmentParams p = draw_augment(seed);
    ASSERT_GE(p.quarter_turns, 0);
    ASSERT_LE(p.quarter_turns, 3);
    ASSERT_LE(std::abs(p.dy), 2);
    ASSERT_LE(std::abs(p.dx), 2);
    const Sample a = augment(s, p);
    ASSERT_EQ(a.image.height, 64u);
    // Pixelwise correspondence: every (image, label) pair of the result
    // occurs at one source location.
    const auto src_idx = apply_augment(
        [&] {
          Grid<std::uint32_t> g(64, 64);
          for (std::uint32_t i = 0; i < g.size(); ++i) g.values[i] = i;
          return g;
        }(),
        p);
    for (std::size_t i = 0; i < a.image.size(); ++i) {
      ASSERT_EQ(a.image.values[i], s.image.values[src_idx.values[i]]);
      ASSERT_EQ(a.label->values[i], s.label->values[src_idx.values[i]]);
      ASSERT_EQ(a.edge->values[i], s.edge->values[src_idx.values[i]]);
      ASSERT_LT(a.label->values[i], 4);
    }
  }
  AugmentParams rot{1, 0, 0};
  EXPECT_EQ(augment(s, rot).label, rot90(*s.label, 1));
}

TEST(Splits, DeterministicAndUnlabelledTarget) {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  const auto a = make_split(cfg, Split::train_source, 8, 3), b = make_split(cfg, Split::train_source, 8, 3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a[i].image, b[i].image);
  const auto t = make_split(cfg, Split::train_target, 8, 3);
  for (const auto& s : t) {
    EXPECT_FALSE(s.label);
    EXPECT_FALSE(s.edge);
    EXPECT_EQ(s.domain, Domain::target);
  }
  EXPECT_NE(a[0].image, make_split(cfg, Split::train_source, 8, 4)[0].image);
}

TEST(Sampler, ReproducibleIndependentBatches) {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  const auto src = make_split(cfg, Split::train_source, 16, 1), tgt = make_split(cfg, Split::train_target, 16, 1);
  UnpairedSampler s(src, tgt, 4, 7);
  auto [s1, t1] = s.at(5);
  auto [s2, t2] = s.at(5);
  EXPECT_EQ(std::vector<double>(s1.images.data().begin(), s1.images.data().end()),
            std::vector<double>(s2.images.data().begin(), s2.images.data().end()));
  EXPECT_EQ(s1.labels, s2.labels);
  EXPECT_EQ(s1.labels.size(), 4u * 32 * 32);
  EXPECT_EQ(s1.edges.size(), 4u * 32 * 32);
  EXPECT_TRUE(t1.labels.empty());
  EXPECT_TRUE(t1.edges.empty());
  EXPECT_EQ(t1.images.shape(), (Shape{4, 1, 32, 32}));
  auto [s3, t3] = s.at(6);
  EXPECT_NE(std::vector<double>(s1.images.data().begin(), s1.images.data().end()),
            std::vector<double>(s3.images.data().begin(), s3.images.data().end()));
  // Different phantom streams back the two domains.
  const auto ls = make_split(cfg, Split::eval_source, 16, 1), lt = make_split(cfg, Split::eval_target, 16, 1);
  for (const auto& x : ls)
    for (const auto& y : lt)
      if (static_cast<std::size_t>(std::count(x.label->values.begin(), x.label->values.end(), 0)) != x.label->size()) {
        EXPECT_NE(x.label, y.label);
      }
  EXPECT_THROW(UnpairedSampler(src, tgt, 0, 1), ConfigError);
  EXPECT_THROW(UnpairedSampler(src, {}, 1, 1), DataError);
}

TEST(PgmDataset, ExportLoadRoundTrip) {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  auto samples = make_split(cfg, Split::eval_source, 4, 2);
  auto tgt = make_split(cfg, Split::train_target, 2, 2);
  samples.insert(samples.end(), tgt.begin(), tgt.end());
  const fs::path dir = temp_dir("roundtrip");
  export_dataset(dir, samples);
  const auto back = load_pgm_dataset(dir);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(back[i].label, samples[i].label);
    EXPECT_EQ(back[i].edge, samples[i].edge);
    EXPECT_EQ(back[i].domain, samples[i].label ? Domain::source : Domain::target);
    for (std::size_t p = 0; p < back[i].image.size(); ++p)
      ASSERT_NEAR(back[i].image.values[p], samples[i].image.values[p], 2.0 / 65535 + 1e-12);
  }
  // Stable after the first quantization.
  const fs::path dir2 = temp_dir("roundtrip2");
  export_dataset(dir2, back);
  const auto again = load_pgm_dataset(dir2);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(again[i].image, back[i].image);
  // Without a manifest the images/ directory is scanned.
  fs::remove(dir / "dataset.lst");
  EXPECT_EQ(load_pgm_dataset(dir).size(), samples.size());
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(PgmDataset, Errors) {
  EXPECT_THROW(load_pgm_dataset("/nonexistent/edgeuda"), DataError);
  const fs::path dir = temp_dir("errors");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  write_pgm((dir / "images" / "a.pgm").string(), image_to_pgm(FloatMap(32, 32, 0.1)));
  write_pgm((dir / "labels" / "a.pgm").string(), labels_to_pgm(LabelMap(16, 16, 1)));
  EXPECT_THROW(load_pgm_dataset(dir), DataError);
  write_pgm((dir / "labels" / "a.pgm").string(), labels_to_pgm(LabelMap(32, 32, 7)));
  EXPECT_THROW(load_pgm_dataset(dir), DataError);
  std::ofstream(dir / "images" / "a.pgm") << "P5\n32 32\n255\nxx";
  EXPECT_THROW(load_pgm_dataset(dir), DataError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace edgeuda
