#pragma once

// Scalar objectives: supervised segmentation and edge cross-entropy,
// discriminator and generator adversarial terms, self-entropy, and the
// per-network composite objectives built from them.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "edgeuda/tensor.hpp"

namespace edgeuda {

inline constexpr double kLogFloor = 1e-12;

struct LossWeights {
  double alpha = 0.1;    // edge-map adversarial weight in the contour objective
  double beta = 0.1;     // feature adversarial weight in the encoder objective
  double lambda = 0.1;   // self-entropy weight in encoder and decoder objectives

  void validate() const {
    if (alpha < 0 || beta < 0 || lambda < 0) throw ConfigError("loss weights must be >= 0");
  }
};

namespace detail {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// mean_i softplus(sign * z_i), differentiable in z.
inline Tensor mean_softplus(Tape& tape, const Tensor& z, double sign, const char* name) {
  double s = 0.0;
  for (double v : z.data()) s += softplus(sign * v);
  const double n = static_cast<double>(z.numel());
  Tensor out = Tensor::scalar(s / n);
  check_finite(out, name);
  if (tape.tracks({&z})) {
    tape.record(out, [z, sign, n](const std::vector<double>& g) mutable {
      auto zs = z.data();
      auto& gz = z.grad_buffer();
      for (std::size_t i = 0; i < zs.size(); ++i) gz[i] += g[0] * sign * sigmoid_scalar(sign * zs[i]) / n;
    });
  }
  return out;
}

}  // namespace detail

/// Mean per-pixel multi-class cross-entropy of channel-softmax(logits)
/// against class indices laid out [N,H,W].
inline Tensor seg_ce(Tape& tape, const Tensor& logits, std::span<const std::uint8_t> labels) {
  detail::require(logits.rank() == 4 && logits.dim(1) >= 2, "seg_ce: logits must be [N,C>=2,H,W]");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  detail::require(labels.size() == n * hw, "seg_ce: label count does not match logits");
  for (auto l : labels)
    if (l >= c) throw DataError("seg_ce: label " + std::to_string(l) + " out of range [0," + std::to_string(c) + ")");
  const double cap = -std::log(kLogFloor);
  const double npix = static_cast<double>(n * hw);
  auto z = logits.data();
  std::vector<double> prob(logits.numel());
  std::vector<std::uint8_t> clamped(n * hw, 0);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = b * c * hw + p;
      double mx = z[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[base + k * hw]);
      double sum = 0.0;
      for (std::size_t k = 0; k < c; ++k) sum += (prob[base + k * hw] = std::exp(z[base + k * hw] - mx));
      for (std::size_t k = 0; k < c; ++k) prob[base + k * hw] /= sum;
      const double nll = mx + std::log(sum) - z[base + labels[b * hw + p] * hw];
      if (nll > cap) {
        clamped[b * hw + p] = 1;
        total += cap;
      } else {
        total += nll;
      }
    }
  Tensor out = Tensor::scalar(total / npix);
  detail::check_finite(out, "seg_ce");
  if (tape.tracks({&logits})) {
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    tape.record(out, [logits, prob = std::move(prob), lab = std::move(lab), clamped = std::move(clamped), n, c,
                      hw, npix](const std::vector<double>& g) mutable {
      auto& gl = logits.grad_buffer();
      const double s = g[0] / npix;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          if (clamped[b * hw + p]) continue;
          const std::size_t base = b * c * hw + p;
          for (std::size_t k = 0; k < c; ++k)
            gl[base + k * hw] += s * (prob[base + k * hw] - (lab[b * hw + p] == k ? 1.0 : 0.0));
        }
    });
  }
  return out;
}

/// Mean per-pixel binary cross-entropy of edge probabilities against a
/// binary edge label. Probabilities are clamped into [1e-12, 1-1e-12].
inline Tensor edge_ce(Tape& tape, const Tensor& edge_prob, std::span<const double> edge_label) {
  detail::require(edge_label.size() == edge_prob.numel(), "edge_ce: label size does not match prediction");
  for (double e : edge_label)
    if (e != 0.0 && e != 1.0) throw DataError("edge_ce: edge label must be binary");
  auto p = edge_prob.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kLogFloor, 1.0 - kLogFloor);
    total += edge_label[i] == 1.0 ? -std::log(q) : -std::log(1.0 - q);
  }
  Tensor out = Tensor::scalar(total / n);
  detail::check_finite(out, "edge_ce");
  if (tape.tracks({&edge_prob})) {
    std::vector<double> lab(edge_label.begin(), edge_label.end());
    tape.record(out, [edge_prob, lab = std::move(lab), n](const std::vector<double>& g) mutable {
      auto p = edge_prob.data();
      auto& gp = edge_prob.grad_buffer();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < kLogFloor || p[i] > 1.0 - kLogFloor) continue;
        gp[i] += g[0] * (lab[i] == 1.0 ? -1.0 / p[i] : 1.0 / (1.0 - p[i])) / n;
      }
    });
  }
  return out;
}

/// Discriminator loss with source labelled 1 and target labelled 0:
/// mean(-log sigmoid(z_s)) + mean(-log(1 - sigmoid(z_t))).
inline Tensor disc_bce(Tape& tape, const Tensor& logit_source, const Tensor& logit_target) {
  Tensor s = detail::mean_softplus(tape, logit_source, -1.0, "disc_bce");
  Tensor t = detail::mean_softplus(tape, logit_target, 1.0, "disc_bce");
  return add(tape, s, t);
}

/// Term a generator-side network minimizes to push the discriminator's
/// target outputs toward the source label. Non-saturating form
/// mean(-log sigmoid(z_t)); otherwise the literal negated target part of
/// the discriminator loss, mean(log(1 - sigmoid(z_t))).
inline Tensor adversarial_generator_term(Tape& tape, const Tensor& logit_target, bool non_saturating = true) {
  if (non_saturating) return detail::mean_softplus(tape, logit_target, -1.0, "adversarial_generator_term");
  return scale(tape, detail::mean_softplus(tape, logit_target, 1.0, "adversarial_generator_term"), -1.0);
}

/// Pixel-averaged Shannon entropy of a channel-softmax output [N,C,H,W].
inline Tensor self_entropy(Tape& tape, const Tensor& softmax_out) {
  detail::require(softmax_out.rank() == 4 && softmax_out.dim(1) >= 2, "self_entropy: need [N,C>=2,H,W]");
  const std::size_t npix = softmax_out.dim(0) * softmax_out.dim(2) * softmax_out.dim(3);
  const double log_floor = std::log(kLogFloor);
  double total = 0.0;
  for (double s : softmax_out.data()) total -= s * (s > kLogFloor ? std::log(s) : log_floor);
  // Rounding can leave a one-hot pixel a hair below zero.
  Tensor out = Tensor::scalar(std::max(0.0, total / static_cast<double>(npix)));
  detail::check_finite(out, "self_entropy");
  if (tape.tracks({&softmax_out})) {
    tape.record(out, [softmax_out, npix, log_floor](const std::vector<double>& g) mutable {
      auto s = softmax_out.data();
      auto& gs = softmax_out.grad_buffer();
      const double k = g[0] / static_cast<double>(npix);
      for (std::size_t i = 0; i < s.size(); ++i)
        gs[i] -= k * (s[i] > kLogFloor ? std::log(s[i]) + 1.0 : log_floor);
    });
  }
  return out;
}

/// base + weight * term, skipping undefined terms.
inline Tensor add_weighted(Tape& tape, const Tensor& base, const Tensor& term, double weight) {
  if (!term.defined()) return base;
  return add(tape, base, scale(tape, term, weight));
}

/// Semantic contour net: L^e_CE + alpha * adversarial generator term.
inline Tensor contour_objective(Tape& tape, const Tensor& edge_ce_term, const Tensor& edge_adv_gen,
                                const LossWeights& w) {
  return add_weighted(tape, edge_ce_term, edge_adv_gen, w.alpha);
}

/// Encoder: L^y_CE + beta * adversarial generator term + lambda * entropy.
inline Tensor encoder_objective(Tape& tape, const Tensor& seg_ce_term, const Tensor& feat_adv_gen,
                                const Tensor& entropy, const LossWeights& w) {
  return add_weighted(tape, add_weighted(tape, seg_ce_term, feat_adv_gen, w.beta), entropy, w.lambda);
}

/// Decoder: L^y_CE + lambda * entropy.
inline Tensor decoder_objective(Tape& tape, const Tensor& seg_ce_term, const Tensor& entropy,
                                const LossWeights& w) {
  return add_weighted(tape, seg_ce_term, entropy, w.lambda);
}

struct ObjectiveTerms {
  Tensor edge_ce;
  Tensor edge_adv_gen;
  Tensor edge_disc_bce;
  Tensor seg_ce;
  Tensor feat_adv_gen;
  Tensor feat_disc_bce;
  Tensor entropy;
};

struct Objectives {
  Tensor contour;
  Tensor edge_disc;
  Tensor encoder;
  Tensor decoder;
  Tensor feat_disc;
};

/// All five per-network objectives from a complete set of terms.
inline Objectives composite_objectives(Tape& tape, const ObjectiveTerms& t, const LossWeights& w) {
  w.validate();
  const std::pair<const Tensor*, const char*> required[] = {
      {&t.edge_ce, "edge_ce"}, {&t.edge_adv_gen, "edge_adv_gen"}, {&t.edge_disc_bce, "edge_disc_bce"},
      {&t.seg_ce, "seg_ce"},   {&t.feat_adv_gen, "feat_adv_gen"}, {&t.feat_disc_bce, "feat_disc_bce"},
      {&t.entropy, "entropy"}};
  for (const auto& [term, name] : required)
    if (!term->defined()) throw ConfigError(std::string("composite_objectives: missing term ") + name);
  return Objectives{contour_objective(tape, t.edge_ce, t.edge_adv_gen, w), t.edge_disc_bce,
                    encoder_objective(tape, t.seg_ce, t.feat_adv_gen, t.entropy, w),
                    decoder_objective(tape, t.seg_ce, t.entropy, w), t.feat_disc_bce};
}

}  // namespace edgeuda
