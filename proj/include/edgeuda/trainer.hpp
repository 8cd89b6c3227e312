#pragma once

// Joint training of the contour net, segmentation encoder/decoder and the two
// discriminators, the discriminator-free inference path, and experiment runs.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edgeuda/checkpoint.hpp"
#include "edgeuda/losses.hpp"
#include "edgeuda/metrics.hpp"
#include "edgeuda/nets.hpp"
#include "edgeuda/synthdata.hpp"

namespace edgeuda {

struct TrainConfig {
  double lr_nets = 1e-2;  // contour net, encoder, decoder
  double lr_disc = 1e-2;  // both discriminators
  double momentum = 0.5;
  LossWeights weights;
  std::size_t steps = 600;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  bool use_edge_adv = true;
  bool use_feat_adv = true;
  bool use_entropy = true;
  bool use_edge_conditioning = true;
  std::size_t eval_every = 100;

  bool non_saturating = true;        // generator term form
  bool entropy_both_domains = false;  // entropy on source predictions too
  bool detach_edges = true;           // no segmentation gradient into the contour net
  std::size_t train_pool = 256;       // phantoms per domain
  std::size_t eval_pool = 32;
  double hd_percentile = 100.0;
  SyntheticConfig data;
  ArchSpec arch;

  void validate() const {
    if (!(lr_nets > 0) || !(lr_disc > 0)) throw ConfigError("learning rates must be > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (train_pool < 1 || eval_pool < 1) throw ConfigError("pool sizes must be >= 1");
    if (hd_percentile <= 0 || hd_percentile > 100) throw ConfigError("hd_percentile must be in (0,100]");
    weights.validate();
    arch.validate();
    data.canny.validate();
    if (data.image_size != arch.image_size) throw ConfigError("data image_size must equal arch image_size");
  }
};

enum class Arm { no_uda, feat, edge, full };

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::no_uda: return "no-uda";
    case Arm::feat: return "feat";
    case Arm::edge: return "edge";
    case Arm::full: return "full";
  }
  return "?";
}

inline Arm parse_arm(const std::string& s) {
  for (Arm a : {Arm::no_uda, Arm::feat, Arm::edge, Arm::full})
    if (s == arm_name(a)) return a;
  throw ConfigError("unknown arm '" + s + "' (expected no-uda|feat|edge|full)");
}

/// The four canonical ablation arms. Weights that an arm switches on keep
/// the configured values; weights it switches off are zeroed.
inline TrainConfig apply_arm(TrainConfig c, Arm arm) {
  const bool feat = arm != Arm::no_uda;
  const bool edge = arm == Arm::edge || arm == Arm::full;
  const bool ent = arm == Arm::full;
  c.use_feat_adv = feat;
  c.use_edge_adv = edge;
  c.use_edge_conditioning = edge;
  c.use_entropy = ent;
  if (!feat) c.weights.beta = 0;
  if (!edge) c.weights.alpha = 0;
  if (!ent) c.weights.lambda = 0;
  return c;
}

/// All five networks plus optimizer state.
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(const ArchSpec& arch, std::uint64_t seed) : arch_(arch) {
    for (NetKind k : kAllNets) nets_[index(k)] = NetworkParams(k, arch, seed);
  }

  const ArchSpec& arch() const { return arch_; }
  NetworkParams& net(NetKind k) { return nets_[index(k)]; }
  const NetworkParams& net(NetKind k) const { return nets_[index(k)]; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  std::vector<double>& velocity(NetKind k, const std::string& param) {
    return velocity_[std::string(net_name(k)) + "." + param];
  }

  void zero_grad() {
    for (auto& n : nets_) n.zero_grad();
  }

  /// Momentum step over every parameter of one network.
  void sgd_step(NetKind k, double lr, double momentum) {
    for (auto& [name, t] : net(k).entries()) sgd_momentum_step(t, velocity(k, name), lr, momentum);
  }

  ModelBundle clone() const {
    ModelBundle b;
    b.arch_ = arch_;
    for (std::size_t i = 0; i < nets_.size(); ++i) b.nets_[i] = nets_[i].clone();
    b.velocity_ = velocity_;
    b.step_ = step_;
    return b;
  }

  /// Parameters as "<net>.<layer>.<weight|bias>", velocities as
  /// "velocity.<net>.<...>", and "meta.step" / "meta.arch".
  NamedTensors to_named() const {
    NamedTensors out;
    out.emplace_back("meta.step", Tensor(Shape{1}, std::vector<double>{static_cast<double>(step_)}));
    out.emplace_back("meta.arch", Tensor(Shape{arch_vector(arch_).size()}, arch_vector(arch_)));
    for (NetKind k : kAllNets)
      for (const auto& [name, t] : net(k).entries())
        out.emplace_back(std::string(net_name(k)) + "." + name, t.detach());
    for (const auto& [key, v] : velocity_)
      if (!v.empty()) out.emplace_back("velocity." + key, Tensor(Shape{v.size()}, v));
    return out;
  }

  static ModelBundle from_named(const NamedTensors& src) {
    auto find = [&](const std::string& key) -> const Tensor* {
      for (const auto& [n, t] : src)
        if (n == key) return &t;
      return nullptr;
    };
    const Tensor* arch = find("meta.arch");
    const Tensor* step = find("meta.step");
    if (!arch || !step) throw DataError("checkpoint: missing meta.arch or meta.step");
    ModelBundle b(arch_from_vector(arch->data()), 0);
    for (NetKind k : kAllNets) b.net(k).assign(src, std::string(net_name(k)) + ".");
    b.step_ = static_cast<std::uint64_t>(step->item());
    for (const auto& [n, t] : src)
      if (n.rfind("velocity.", 0) == 0) b.velocity_[n.substr(9)] = std::vector<double>(t.data().begin(), t.data().end());
    return b;
  }

  void save(const std::string& path) const { save_checkpoint(path, to_named()); }
  static ModelBundle load(const std::string& path) { return from_named(load_checkpoint(path)); }

 private:
  static std::size_t index(NetKind k) { return static_cast<std::size_t>(k); }

  static std::vector<double> arch_vector(const ArchSpec& a) {
    std::vector<double> v{double(a.image_size), double(a.classes), double(a.contour_width)};
    for (auto x : a.encoder_widths) v.push_back(double(x));
    for (auto x : a.decoder_widths) v.push_back(double(x));
    for (auto x : a.edge_disc_widths) v.push_back(double(x));
    v.push_back(double(a.edge_disc_hidden));
    for (auto x : a.feat_disc_widths) v.push_back(double(x));
    v.push_back(double(a.feat_disc_hidden));
    v.push_back(a.leaky_slope);
    return v;
  }

  static ArchSpec arch_from_vector(std::span<const double> v) {
    if (v.size() != arch_vector(ArchSpec{}).size()) throw DataError("checkpoint: malformed meta.arch");
    ArchSpec a;
    std::size_t i = 0;
    auto next = [&] { return static_cast<std::size_t>(v[i++]); };
    a.image_size = next();
    a.classes = next();
    a.contour_width = next();
    for (auto& x : a.encoder_widths) x = next();
    for (auto& x : a.decoder_widths) x = next();
    for (auto& x : a.edge_disc_widths) x = next();
    a.edge_disc_hidden = next();
    for (auto& x : a.feat_disc_widths) x = next();
    a.feat_disc_hidden = next();
    a.leaky_slope = v[i];
    return a;
  }

  ArchSpec arch_;
  std::array<NetworkParams, 5> nets_;
  std::map<std::string, std::vector<double>> velocity_;
  std::uint64_t step_ = 0;
};

/// Objectives in update order.
enum class Objective { edge_disc, contour, feat_disc, encoder, decoder };
inline constexpr std::size_t kNumObjectives = 5;

inline NetKind assigned_net(Objective o) {
  switch (o) {
    case Objective::edge_disc: return NetKind::edge_disc;
    case Objective::contour: return NetKind::contour;
    case Objective::feat_disc: return NetKind::feat_disc;
    case Objective::encoder: return NetKind::encoder;
    case Objective::decoder: return NetKind::decoder;
  }
  return NetKind::contour;
}

struct StepLosses {
  double edge_ce = std::nan("");
  double edge_disc = std::nan("");
  double edge_adv = std::nan("");
  double seg_ce = std::nan("");
  double feat_disc = std::nan("");
  double feat_adv = std::nan("");
  double entropy = std::nan("");
  // touched[o][n]: network n held a nonzero gradient right after objective
  // o was backpropagated.
  std::array<std::array<bool, 5>, kNumObjectives> touched{};
  std::array<bool, kNumObjectives> ran{};
};

inline constexpr const char* kLossCsvHeader = "step,edge_ce,edge_disc,edge_adv,seg_ce,feat_disc,feat_adv,entropy";

inline void write_loss_row(std::ostream& os, std::uint64_t step, const StepLosses& l) {
  os << step;
  for (double v : {l.edge_ce, l.edge_disc, l.edge_adv, l.seg_ce, l.feat_disc, l.feat_adv, l.entropy})
    os << ',' << fmt_num(v);
  os << '\n';
}

namespace detail {

/// Gradient buffers of every network; a backward pass touched a network iff
/// its buffers changed.
using GradMarks = std::array<std::vector<double>, kAllNets.size()>;

inline GradMarks grad_marks(const ModelBundle& b) {
  GradMarks m;
  for (NetKind k : kAllNets) {
    auto& v = m[static_cast<std::size_t>(k)];
    for (const auto& [name, t] : b.net(k).entries()) {
      if (t.has_grad())
        v.insert(v.end(), t.grad().begin(), t.grad().end());
      else
        v.resize(v.size() + t.numel(), 0.0);
    }
  }
  return m;
}

inline void mark_touched(StepLosses& out, Objective o, const ModelBundle& b, const GradMarks& before) {
  const auto oi = static_cast<std::size_t>(o);
  out.ran[oi] = true;
  const GradMarks after = grad_marks(b);
  for (NetKind k : kAllNets) {
    const auto ki = static_cast<std::size_t>(k);
    out.touched[oi][ki] = after[ki] != before[ki];
  }
}

inline Tensor zeros_like_channel(const Tensor& images) {
  return Tensor(Shape{images.dim(0), 1, images.dim(2), images.dim(3)});
}

template <class F>
auto guarded(std::uint64_t step, const char* phase, F&& f) {
  try {
    return f();
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(step) + ", " + phase + ": " + e.what());
  }
}

}  // namespace detail

/// Which networks a step may update; all by default.
using UpdateMask = std::array<bool, 5>;
inline constexpr UpdateMask kUpdateAll = {true, true, true, true, true};

/// One round of the six-phase schedule:
///   1. contour net on source and target images
///   2. edge-map discriminator step on detached edge maps
///   3. contour net step: edge CE + alpha * generator term (discriminator frozen)
///   4. encoder/decoder on image + detached edge map
///   5. feature discriminator step on detached features
///   6. encoder and decoder steps from one shared forward
inline StepLosses train_step(ModelBundle& bundle, const Batch& source, const Batch& target, const TrainConfig& cfg,
                             const UpdateMask& update = kUpdateAll) {
  using enum NetKind;
  StepLosses out;
  const std::uint64_t step = bundle.step();
  const LossWeights& w = cfg.weights;
  auto may = [&](NetKind k) { return update[static_cast<std::size_t>(k)]; };
  const double slope = bundle.arch().leaky_slope;
  if (source.labels.empty() || source.edges.empty()) throw DataError("train_step: source batch lacks labels");

  Tape tape;
  Tensor edge_in_s, edge_in_t;
  if (cfg.use_edge_conditioning) {
    Tensor es, et;
    detail::guarded(step, "contour forward", [&] {
      es = contour_forward(tape, bundle.net(contour), source.images);
      et = contour_forward(tape, bundle.net(contour), target.images);
      return 0;
    });

    if (cfg.use_edge_adv) {
      detail::guarded(step, "edge discriminator objective", [&] {
        bundle.zero_grad();
        Tape dt;
        const NetworkParams& d = bundle.net(edge_disc);
        Tensor l = disc_bce(dt, edge_disc_forward(dt, d, es.detach(), slope), edge_disc_forward(dt, d, et.detach(), slope));
        const auto before = detail::grad_marks(bundle);
        dt.backward(l);
        detail::mark_touched(out, Objective::edge_disc, bundle, before);
        if (may(edge_disc)) bundle.sgd_step(edge_disc, cfg.lr_disc, cfg.momentum);
        out.edge_disc = l.item();
        return 0;
      });
    }

    detail::guarded(step, "contour objective", [&] {
      bundle.zero_grad();
      Tensor ce = edge_ce(tape, es, source.edges);
      Tensor adv;
      if (cfg.use_edge_adv) {
        const NetworkParams frozen = bundle.net(edge_disc).frozen();
        adv = adversarial_generator_term(tape, edge_disc_forward(tape, frozen, et, slope), cfg.non_saturating);
        out.edge_adv = adv.item();
      }
      const Tensor obj = contour_objective(tape, ce, adv, w);
      const auto before = detail::grad_marks(bundle);
      tape.backward(obj);
      detail::mark_touched(out, Objective::contour, bundle, before);
      if (cfg.detach_edges && may(contour)) bundle.sgd_step(contour, cfg.lr_nets, cfg.momentum);
      out.edge_ce = ce.item();
      return 0;
    });
    edge_in_s = cfg.detach_edges ? es.detach() : es;
    edge_in_t = cfg.detach_edges ? et.detach() : et;
  } else {
    edge_in_s = detail::zeros_like_channel(source.images);
    edge_in_t = detail::zeros_like_channel(target.images);
  }

  const bool need_target = cfg.use_feat_adv || cfg.use_entropy;
  Tensor fs, ft, logits_s, logits_t;
  detail::guarded(step, "segmentation forward", [&] {
    fs = encoder_forward(tape, bundle.net(encoder), concat_channels(tape, source.images, edge_in_s));
    logits_s = decoder_forward(tape, bundle.net(decoder), fs);
    if (need_target) {
      ft = encoder_forward(tape, bundle.net(encoder), concat_channels(tape, target.images, edge_in_t));
      logits_t = decoder_forward(tape, bundle.net(decoder), ft);
    }
    return 0;
  });

  if (cfg.use_feat_adv) {
    detail::guarded(step, "feature discriminator objective", [&] {
      // Contour gradients survive for the end-to-end mode.
      for (auto k : {encoder, decoder, edge_disc, feat_disc}) bundle.net(k).zero_grad();
      Tape dt;
      const NetworkParams& d = bundle.net(feat_disc);
      Tensor l = disc_bce(dt, feat_disc_forward(dt, d, fs.detach(), slope), feat_disc_forward(dt, d, ft.detach(), slope));
      const auto before = detail::grad_marks(bundle);
      dt.backward(l);
      detail::mark_touched(out, Objective::feat_disc, bundle, before);
      if (may(feat_disc)) bundle.sgd_step(feat_disc, cfg.lr_disc, cfg.momentum);
      out.feat_disc = l.item();
      return 0;
    });
  }

  detail::guarded(step, "encoder/decoder objectives", [&] {
    for (auto k : {encoder, decoder, edge_disc, feat_disc}) bundle.net(k).zero_grad();
    if (cfg.detach_edges) bundle.net(contour).zero_grad();
    Tensor ce = seg_ce(tape, logits_s, source.labels);
    Tensor ent;
    if (need_target) {
      ent = self_entropy(tape, softmax_channels(tape, logits_t));
      if (cfg.entropy_both_domains)
        ent = scale(tape, add(tape, ent, self_entropy(tape, softmax_channels(tape, logits_s))), 0.5);
      out.entropy = ent.item();
    }
    const Tensor ent_term = cfg.use_entropy ? ent : Tensor();
    Tensor adv;
    if (cfg.use_feat_adv) {
      const NetworkParams frozen = bundle.net(feat_disc).frozen();
      adv = adversarial_generator_term(tape, feat_disc_forward(tape, frozen, ft, slope), cfg.non_saturating);
      out.feat_adv = adv.item();
    }
    // The generator term does not depend on decoder parameters, so one
    // backward pass of the encoder objective also yields the decoder
    // objective's gradient for the decoder.
    Tensor enc_obj = encoder_objective(tape, ce, adv, ent_term, w);
    const auto before = detail::grad_marks(bundle);
    tape.backward(enc_obj);
    detail::mark_touched(out, Objective::encoder, bundle, before);
    detail::mark_touched(out, Objective::decoder, bundle, before);
    if (may(encoder)) bundle.sgd_step(encoder, cfg.lr_nets, cfg.momentum);
    if (may(decoder)) bundle.sgd_step(decoder, cfg.lr_nets, cfg.momentum);
    if (!cfg.detach_edges && cfg.use_edge_conditioning && may(contour))
      bundle.sgd_step(contour, cfg.lr_nets, cfg.momentum);
    out.seg_ce = ce.item();
    return 0;
  });

  bundle.zero_grad();
  bundle.set_step(step + 1);
  return out;
}

struct InferResult {
  std::vector<LabelMap> classes;  // argmax per pixel
  Tensor edge_prob;               // [N,1,H,W]
  Tensor softmax;                 // [N,C,H,W]
};

/// Test-time path: contour net -> concat with image -> encoder -> decoder ->
/// softmax -> argmax. Reads no discriminator parameters.
inline InferResult infer(const ModelBundle& bundle, const Tensor& images, bool use_edge_conditioning = true) {
  detail::require(images.rank() == 4 && images.dim(1) == 1, "infer: images must be [N,1,H,W]");
  if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0)
    throw ShapeError("infer: spatial dims must be divisible by 8, got " + shape_str(images.shape()));
  Tape tape = Tape::disabled();
  InferResult r;
  r.edge_prob = contour_forward(tape, bundle.net(NetKind::contour), images);
  const Tensor edge = use_edge_conditioning ? r.edge_prob : detail::zeros_like_channel(images);
  const Tensor feats = encoder_forward(tape, bundle.net(NetKind::encoder), concat_channels(tape, images, edge));
  r.softmax = softmax_channels(tape, decoder_forward(tape, bundle.net(NetKind::decoder), feats));
  const std::size_t n = images.dim(0), c = r.softmax.dim(1), h = images.dim(2), wd = images.dim(3), hw = h * wd;
  auto s = r.softmax.data();
  for (std::size_t b = 0; b < n; ++b) {
    LabelMap m(h, wd);
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (s[(b * c + k) * hw + p] > s[(b * c + best) * hw + p]) best = k;
      m.values[p] = static_cast<std::uint8_t>(best);
    }
    r.classes.push_back(std::move(m));
  }
  return r;
}

/// Per-pixel Shannon entropy maps [N,H,W] of a softmax output.
inline std::vector<FloatMap> entropy_maps(const Tensor& softmax) {
  const std::size_t n = softmax.dim(0), c = softmax.dim(1), h = softmax.dim(2), w = softmax.dim(3), hw = h * w;
  std::vector<FloatMap> out;
  auto s = softmax.data();
  for (std::size_t b = 0; b < n; ++b) {
    FloatMap m(h, w, 0.0);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        const double v = s[(b * c + k) * hw + p];
        if (v > kLogFloor) m.values[p] -= v * std::log(v);
      }
    out.push_back(std::move(m));
  }
  return out;
}

inline MetricsReport evaluate(const ModelBundle& bundle, const std::vector<Sample>& data, bool use_edge_conditioning = true,
                              double hd_percentile = 100.0) {
  return evaluate(
      data,
      [&](const Tensor& images) {
        InferResult r = infer(bundle, images, use_edge_conditioning);
        Prediction p;
        p.classes = std::move(r.classes);
        for (const auto& m : entropy_maps(r.softmax)) {
          double s = 0.0;
          for (double v : m.values) s += v;
          p.mean_entropy.push_back(s / static_cast<double>(m.size()));
        }
        return p;
      },
      8, hd_percentile);
}

/// Deterministic data for one experiment seed.
struct ExperimentData {
  std::vector<Sample> train_source, train_target, eval_source, eval_target;

  explicit ExperimentData(const TrainConfig& cfg)
      : train_source(make_split(cfg.data, Split::train_source, cfg.train_pool, cfg.seed)),
        train_target(make_split(cfg.data, Split::train_target, cfg.train_pool, cfg.seed)),
        eval_source(make_split(cfg.data, Split::eval_source, cfg.eval_pool, cfg.seed)),
        eval_target(make_split(cfg.data, Split::eval_target, cfg.eval_pool, cfg.seed)) {}
};

struct EvalRecord {
  std::uint64_t step = 0;
  MetricsReport source, target;
};

struct ExperimentResult {
  ModelBundle bundle;
  std::vector<std::pair<std::uint64_t, StepLosses>> losses;
  std::vector<EvalRecord> evals;
};

/// Trains from `start` (or a fresh bundle) up to cfg.steps, evaluating on
/// held-out source and target sets every eval_every steps and at the end.
inline ExperimentResult run_experiment(const TrainConfig& cfg, std::optional<ModelBundle> start = std::nullopt,
                                       const ExperimentData* data = nullptr,
                                       const std::function<void(std::uint64_t, const StepLosses&)>& on_step = {},
                                       const std::function<void(const ModelBundle&, const EvalRecord&)>& on_eval = {}) {
  cfg.validate();
  std::optional<ExperimentData> owned;
  if (!data) data = &owned.emplace(cfg);
  ExperimentResult res;
  res.bundle = start ? std::move(*start) : ModelBundle(cfg.arch, cfg.seed);
  const UnpairedSampler sampler(data->train_source, data->train_target, cfg.batch, cfg.seed);
  auto eval_now = [&] {
    res.evals.push_back({res.bundle.step(), evaluate(res.bundle, data->eval_source, cfg.use_edge_conditioning, cfg.hd_percentile),
                         evaluate(res.bundle, data->eval_target, cfg.use_edge_conditioning, cfg.hd_percentile)});
    if (on_eval) on_eval(res.bundle, res.evals.back());
  };
  while (res.bundle.step() < cfg.steps) {
    const auto [src, tgt] = sampler.at(res.bundle.step());
    StepLosses l = train_step(res.bundle, src, tgt, cfg);
    res.losses.emplace_back(res.bundle.step(), l);
    if (on_step) on_step(res.bundle.step(), l);
    if (cfg.eval_every > 0 && res.bundle.step() % cfg.eval_every == 0 && res.bundle.step() < cfg.steps) eval_now();
  }
  eval_now();
  return res;
}

}  // namespace edgeuda
