#include <gtest/gtest.h>

#include <random>

#include "edgeuda/nets.hpp"
#include "gradcheck.hpp"

namespace edgeuda {
namespace {

using testing::gradcheck;
using testing::project;
using testing::random_tensor;

ArchSpec small_arch() {
  ArchSpec a;
  a.image_size = 32;
  a.contour_width = 2;
  a.encoder_widths = {3, 3, 4, 4};
  a.decoder_widths = {3, 3, 2};
  a.edge_disc_widths = {2, 2, 3, 3};
  a.edge_disc_hidden = 4;
  a.feat_disc_widths = {3, 3, 2};
  a.feat_disc_hidden = 3;
  return a;
}

ArchSpec arch32() {
  ArchSpec a;
  a.image_size = 32;
  return a;
}

std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; }
std::size_t fc_count(std::size_t in, std::size_t out) { return out * in + out; }

TEST(Nets, ShapeContracts) {
  const ArchSpec a = arch32();
  std::mt19937_64 rng(1);
  Tape tape = Tape::disabled();
  Tensor img = random_tensor({1, 1, 32, 32}, rng, -1, 1, false);
  Tensor e = contour_forward(tape, NetworkParams(NetKind::contour, a, 1), img);
  ASSERT_EQ(e.shape(), (Shape{1, 1, 32, 32}));
  for (double v : e.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  Tensor f = encoder_forward(tape, NetworkParams(NetKind::encoder, a, 1), random_tensor({1, 2, 32, 32}, rng, -1, 1, false));
  EXPECT_EQ(f.shape(), (Shape{1, 64, 4, 4}));
  Tensor logits = decoder_forward(tape, NetworkParams(NetKind::decoder, a, 1), f);
  EXPECT_EQ(logits.shape(), (Shape{1, 4, 32, 32}));
  Tensor sm = softmax_channels(tape, logits);
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += sm[k * 1024 + p];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(edge_disc_forward(tape, NetworkParams(NetKind::edge_disc, a, 1), e).shape(), (Shape{1, 1}));
  EXPECT_EQ(feat_disc_forward(tape, NetworkParams(NetKind::feat_disc, a, 1), f).shape(), (Shape{1, 1}));
}

TEST(Nets, SharedEncoderShapesMatchAcrossDomains) {
  const ArchSpec a = arch32();
  std::mt19937_64 rng(2);
  NetworkParams enc(NetKind::encoder, a, 3);
  Tape tape = Tape::disabled();
  Tensor fs = encoder_forward(tape, enc, random_tensor({2, 2, 32, 32}, rng, -1, 1, false));
  Tensor ft = encoder_forward(tape, enc, random_tensor({2, 2, 32, 32}, rng, -1, 1, false));
  EXPECT_EQ(fs.shape(), ft.shape());
  Tensor fc = encoder_forward(tape, enc, Tensor(Shape{1, 2, 32, 32}, 0.7));
  for (double v : fc.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Nets, InputContractsEnforced) {
  const ArchSpec a = arch32();
  Tape tape = Tape::disabled();
  EXPECT_THROW(encoder_forward(tape, NetworkParams(NetKind::encoder, a, 1), Tensor(Shape{1, 1, 32, 32})), ShapeError);
  EXPECT_THROW(encoder_forward(tape, NetworkParams(NetKind::encoder, a, 1), Tensor(Shape{1, 2, 36, 36})), ShapeError);
  EXPECT_THROW(contour_forward(tape, NetworkParams(NetKind::contour, a, 1), Tensor(Shape{1, 1, 30, 30})), ShapeError);
  EXPECT_THROW(contour_forward(tape, NetworkParams(NetKind::decoder, a, 1), Tensor(Shape{1, 1, 32, 32})), ShapeError);
}

TEST(Nets, ZeroFinalLayerGivesHalf) {
  NetworkParams p(NetKind::contour, arch32(), 5);
  for (auto& [name, t] : p.entries())
    if (name.rfind("up2.", 0) == 0) std::fill(t.buffer().begin(), t.buffer().end(), 0.0);
  std::mt19937_64 rng(4);
  Tape tape = Tape::disabled();
  Tensor out = contour_forward(tape, p, random_tensor({2, 1, 32, 32}, rng, -1, 1, false));
  for (double v : out.data()) EXPECT_EQ(v, 0.5);
}

TEST(Nets, ParameterCountsMatchClosedForm) {
  const ArchSpec a;  // defaults, 64x64
  const std::size_t cw = a.contour_width;
  const std::size_t contour = conv_count(1, cw, 3) + conv_count(cw, cw, 3) + conv_count(cw, 2 * cw, 3) +
                              3 * conv_count(2 * cw, 2 * cw, 3) + conv_count(2 * cw, cw, 3) + conv_count(cw, 1, 3);
  const auto& e = a.encoder_widths;
  const std::size_t encoder = conv_count(2, e[0], 3) + conv_count(e[0], e[1], 3) + conv_count(e[1], e[2], 3) +
                              conv_count(e[2], e[3], 3) + conv_count(e[3], e[3], 3);
  const auto& d = a.decoder_widths;
  const std::size_t decoder =
      conv_count(e[3], d[0], 3) + conv_count(d[0], d[1], 3) + conv_count(d[1], d[2], 3) + conv_count(d[2], 4, 1);
  const auto& w = a.edge_disc_widths;
  const std::size_t edge = conv_count(1, w[0], 3) + conv_count(w[0], w[1], 3) + conv_count(w[1], w[2], 3) +
                           conv_count(w[2], w[3], 3) + fc_count(w[3] * 16, a.edge_disc_hidden) +
                           fc_count(a.edge_disc_hidden, 1);
  const auto& v = a.feat_disc_widths;
  const std::size_t feat = conv_count(e[3], v[0], 3) + conv_count(v[0], v[1], 3) + conv_count(v[1], v[2], 3) +
                           fc_count(v[2] * 4, a.feat_disc_hidden) + fc_count(a.feat_disc_hidden, 1);
  EXPECT_EQ(NetworkParams(NetKind::contour, a, 0).count(), contour);
  EXPECT_EQ(NetworkParams(NetKind::encoder, a, 0).count(), encoder);
  EXPECT_EQ(NetworkParams(NetKind::decoder, a, 0).count(), decoder);
  EXPECT_EQ(NetworkParams(NetKind::edge_disc, a, 0).count(), edge);
  EXPECT_EQ(NetworkParams(NetKind::feat_disc, a, 0).count(), feat);
  // Layer counts: 4 conv + 2 fc and 3 conv + 2 fc.
  EXPECT_EQ(NetworkParams(NetKind::edge_disc, a, 0).entries().size(), 12u);
  EXPECT_EQ(NetworkParams(NetKind::feat_disc, a, 0).entries().size(), 10u);
}

TEST(Nets, InitializationIsKaimingUniformWithZeroBias) {
  NetworkParams p(NetKind::encoder, ArchSpec{}, 9);
  for (const auto& [name, t] : p.entries()) {
    if (name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0);
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(t.numel() / t.dim(0)));
    for (double v : t.data()) EXPECT_LE(std::abs(v), bound);
  }
  NetworkParams q(NetKind::encoder, ArchSpec{}, 9), r(NetKind::decoder, ArchSpec{}, 9);
  EXPECT_EQ(std::vector<double>(p.get("stem.weight").data().begin(), p.get("stem.weight").data().end()),
            std::vector<double>(q.get("stem.weight").data().begin(), q.get("stem.weight").data().end()));
}

TEST(Nets, ArchMismatchRejected) {
  ArchSpec a;
  a.image_size = 60;
  EXPECT_THROW(NetworkParams(NetKind::encoder, a, 0), ConfigError);
}

TEST(Nets, DeterministicForward) {
  const ArchSpec a = arch32();
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 1, 32, 32}, rng, 0, 1, false);
  NetworkParams d(NetKind::edge_disc, a, 2);
  Tape tape = Tape::disabled();
  Tensor l1 = edge_disc_forward(tape, d, x), l2 = edge_disc_forward(tape, d, x);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(l1[i], l2[i]);
  NetworkParams c(NetKind::contour, a, 2);
  Tensor e1 = contour_forward(tape, c, x), e2 = contour_forward(tape, c, x);
  for (std::size_t i = 0; i < e1.numel(); ++i) ASSERT_EQ(e1[i], e2[i]);
}

TEST(Nets, GradientReachesFirstLayer) {
  NetworkParams p(NetKind::contour, arch32(), 3);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({1, 1, 32, 32}, rng, -1, 1, false);
  Tensor r = random_tensor({1, 1, 32, 32}, rng, -1, 1, false);
  Tape tape;
  tape.backward(project(tape, contour_forward(tape, p, x), r));
  const Tensor& w = p.get("conv1.weight");
  ASSERT_TRUE(w.has_grad());
  double mag = 0;
  for (double g : w.grad()) mag += std::abs(g);
  EXPECT_GT(mag, 0.0);
}

// Finite differences through every full network; parameters and inputs.
TEST(Nets, GradCheckFullNetworks) {
  const ArchSpec a = small_arch();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto params_and = [](NetworkParams& p, Tensor x) {
      std::vector<Tensor> v{std::move(x)};
      for (auto& e : p.entries()) v.push_back(e.second);
      return v;
    };
    {
      NetworkParams p(NetKind::contour, a, seed);
      testing::jitter_biases(p, rng);
      Tensor x = random_tensor({1, 1, 32, 32}, rng);
      Tensor r = random_tensor({1, 1, 32, 32}, rng, -1, 1, false);
      EXPECT_LT(gradcheck([&](Tape& t) { return project(t, contour_forward(t, p, x), r); }, params_and(p, x), 1e-6, 16),
                1e-3)
          << "contour seed " << seed;
    }
    {
      NetworkParams enc(NetKind::encoder, a, seed), dec(NetKind::decoder, a, seed);
      testing::jitter_biases(enc, rng);
      testing::jitter_biases(dec, rng);
      Tensor x = random_tensor({1, 2, 32, 32}, rng);
      Tensor r = random_tensor({1, 4, 32, 32}, rng, -1, 1, false);
      auto inputs = params_and(enc, x);
      for (auto& e : dec.entries()) inputs.push_back(e.second);
      EXPECT_LT(gradcheck([&](Tape& t) { return project(t, decoder_forward(t, dec, encoder_forward(t, enc, x)), r); },
                          inputs, 1e-6, 16),
                1e-3)
          << "encoder/decoder seed " << seed;
    }
    {
      NetworkParams p(NetKind::edge_disc, a, seed);
      testing::jitter_biases(p, rng);
      Tensor x = random_tensor({2, 1, 32, 32}, rng, 0, 1);
      Tensor r = random_tensor({2, 1}, rng, -1, 1, false);
      EXPECT_LT(gradcheck([&](Tape& t) { return project(t, edge_disc_forward(t, p, x), r); }, params_and(p, x), 1e-6, 16),
                1e-3)
          << "edge disc seed " << seed;
    }
    {
      NetworkParams p(NetKind::feat_disc, a, seed);
      testing::jitter_biases(p, rng);
      Tensor x = random_tensor({2, 4, 4, 4}, rng);
      Tensor r = random_tensor({2, 1}, rng, -1, 1, false);
      EXPECT_LT(gradcheck([&](Tape& t) { return project(t, feat_disc_forward(t, p, x), r); }, params_and(p, x), 1e-6, 16),
                1e-3)
          << "feat disc seed " << seed;
    }
  }
}

// Over many initializations, no class is systematically favoured: the
// per-network majority class is spread evenly (chi-square, 3 dof, p = 0.001).
TEST(Nets, UntrainedClassHistogramNearUniform) {
  const ArchSpec a = arch32();
  std::array<double, 4> counts{};
  const int nets = 80;
  for (int s = 0; s < nets; ++s) {
    NetworkParams enc(NetKind::encoder, a, 1000 + s), dec(NetKind::decoder, a, 1000 + s);
    std::mt19937_64 rng(s);
    Tape tape = Tape::disabled();
    Tensor logits = decoder_forward(tape, dec, encoder_forward(tape, enc, random_tensor({1, 2, 32, 32}, rng, -1, 1, false)));
    std::array<std::size_t, 4> h{};
    for (std::size_t p = 0; p < 1024; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < 4; ++k)
        if (logits[k * 1024 + p] > logits[best * 1024 + p]) best = k;
      ++h[best];
    }
    counts[std::max_element(h.begin(), h.end()) - h.begin()] += 1;
  }
  double chi2 = 0;
  for (double c : counts) chi2 += (c - nets / 4.0) * (c - nets / 4.0) / (nets / 4.0);
  EXPECT_LT(chi2, 16.27);
}

TEST(Nets, CloneIsIndependentAndFrozenUntracked) {
  NetworkParams p(NetKind::decoder, arch32(), 1);
  NetworkParams c = p.clone();
  c.entries()[0].second.buffer()[0] += 1.0;
  EXPECT_NE(c.get("up1.weight")[0], p.get("up1.weight")[0]);
  NetworkParams f = p.frozen();
  for (const auto& e : f.entries()) EXPECT_FALSE(e.second.requires_grad());
  for (const auto& e : p.entries()) EXPECT_TRUE(e.second.requires_grad());
}

TEST(Nets, ReadCounterCountsLookups) {
  NetworkParams p(NetKind::feat_disc, ArchSpec{}, 1);
  const auto before = p.reads();
  Tape tape = Tape::disabled();
  feat_disc_forward(tape, p, Tensor(Shape{1, 64, 8, 8}, 0.1));
  EXPECT_GT(p.reads(), before);
  NetworkParams alias = p;
  const auto mid = p.reads();
  alias.get("fc2.bias");
  EXPECT_EQ(p.reads(), mid + 1);
}

}  // namespace
}  // namespace edgeuda
