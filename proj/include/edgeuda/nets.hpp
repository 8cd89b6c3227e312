#pragma once

// The five networks of the framework: semantic contour net, segmentation
// encoder and decoder, edge-map discriminator, feature discriminator.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "edgeuda/checkpoint.hpp"
#include "edgeuda/tensor.hpp"

namespace edgeuda {

enum class NetKind { contour, encoder, decoder, edge_disc, feat_disc };

inline std::string_view net_name(NetKind k) {
  switch (k) {
    case NetKind::contour: return "contour";
    case NetKind::encoder: return "encoder";
    case NetKind::decoder: return "decoder";
    case NetKind::edge_disc: return "edge_disc";
    case NetKind::feat_disc: return "feat_disc";
  }
  return "?";
}

inline constexpr std::array<NetKind, 5> kAllNets = {NetKind::contour, NetKind::encoder, NetKind::decoder,
                                                    NetKind::edge_disc, NetKind::feat_disc};

/// Channel widths and sizes of all five networks. Every width is a knob;
/// the defaults keep a 64x64 run on one CPU core in the minutes range.
struct ArchSpec {
  std::size_t image_size = 64;
  std::size_t classes = 4;
  std::size_t contour_width = 8;                                 // doubled after the first downsample
  std::array<std::size_t, 4> encoder_widths = {16, 16, 32, 64};  // stem, then three stride-2 stages
  std::array<std::size_t, 3> decoder_widths = {32, 16, 8};
  std::array<std::size_t, 4> edge_disc_widths = {8, 16, 32, 32};
  std::size_t edge_disc_hidden = 64;
  std::array<std::size_t, 3> feat_disc_widths = {32, 32, 16};
  std::size_t feat_disc_hidden = 32;
  double leaky_slope = 0.2;

  std::size_t features() const { return encoder_widths[3]; }

  void validate() const {
    if (image_size < 32 || image_size % 8 != 0)
      throw ConfigError("arch: image_size must be >= 32 and divisible by 8");
    if (classes < 2) throw ConfigError("arch: need at least 2 classes");
  }
};

struct LayerSpec {
  enum class Type { conv, linear } type;
  std::string name;
  std::size_t in, out, kernel;  // kernel ignored for linear
};

/// Layer tables shared by construction and forward passes.
inline std::vector<LayerSpec> layer_table(NetKind kind, const ArchSpec& a) {
  using T = LayerSpec::Type;
  const std::size_t cw = a.contour_width;
  switch (kind) {
    case NetKind::contour:
      return {{T::conv, "conv1", 1, cw, 3},          {T::conv, "conv2", cw, cw, 3},
              {T::conv, "conv3", cw, 2 * cw, 3},     {T::conv, "conv4", 2 * cw, 2 * cw, 3},
              {T::conv, "res1", 2 * cw, 2 * cw, 3},  {T::conv, "res2", 2 * cw, 2 * cw, 3},
              {T::conv, "up1", 2 * cw, cw, 3},       {T::conv, "up2", cw, 1, 3}};
    case NetKind::encoder: {
      const auto& e = a.encoder_widths;
      return {{T::conv, "stem", 2, e[0], 3},
              {T::conv, "down1", e[0], e[1], 3},
              {T::conv, "down2", e[1], e[2], 3},
              {T::conv, "down3", e[2], e[3], 3},
              {T::conv, "mix", e[3], e[3], 3}};
    }
    case NetKind::decoder: {
      const auto& d = a.decoder_widths;
      return {{T::conv, "up1", a.features(), d[0], 3},
              {T::conv, "up2", d[0], d[1], 3},
              {T::conv, "up3", d[1], d[2], 3},
              {T::conv, "head", d[2], a.classes, 1}};
    }
    case NetKind::edge_disc: {
      const auto& w = a.edge_disc_widths;
      const std::size_t s = a.image_size / 16;
      return {{T::conv, "conv1", 1, w[0], 3},       {T::conv, "conv2", w[0], w[1], 3},
              {T::conv, "conv3", w[1], w[2], 3},    {T::conv, "conv4", w[2], w[3], 3},
              {T::linear, "fc1", w[3] * s * s, a.edge_disc_hidden, 0},
              {T::linear, "fc2", a.edge_disc_hidden, 1, 0}};
    }
    case NetKind::feat_disc: {
      const auto& w = a.feat_disc_widths;
      const std::size_t s = a.image_size / 32;
      return {{T::conv, "conv1", a.features(), w[0], 3}, {T::conv, "conv2", w[0], w[1], 3},
              {T::conv, "conv3", w[1], w[2], 3},
              {T::linear, "fc1", w[2] * s * s, a.feat_disc_hidden, 0},
              {T::linear, "fc2", a.feat_disc_hidden, 1, 0}};
    }
  }
  return {};
}

namespace detail {

struct AccessCounter {
  std::shared_ptr<std::atomic<std::uint64_t>> reads = std::make_shared<std::atomic<std::uint64_t>>(0);
  void hit() const { reads->fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t value() const { return reads->load(std::memory_order_relaxed); }
};

inline std::uint64_t seed_offset(NetKind k) {
  switch (k) {
    case NetKind::contour: return 0x1001;
    case NetKind::encoder: return 0x2002;
    case NetKind::decoder: return 0x3003;
    case NetKind::edge_disc: return 0x4004;
    case NetKind::feat_disc: return 0x5005;
  }
  return 0;
}

}  // namespace detail

/// Named parameters of one network. Copies alias the same tensors (and the
/// same read counter); use clone() for an independent deep copy.
class NetworkParams {
 public:
  NetworkParams() = default;

  /// Kaiming-uniform (fan-in) weights, zero biases.
  NetworkParams(NetKind kind, const ArchSpec& arch, std::uint64_t seed) : kind_(kind) {
    arch.validate();
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + detail::seed_offset(kind));
    const auto table = layer_table(kind, arch);
    for (std::size_t i = 0; i < table.size(); ++i) {
      const auto& l = table[i];
      if (i > 0 && table[i - 1].type == l.type && l.in != table[i - 1].out)
        throw ConfigError("arch: layer " + l.name + " input width does not match previous layer");
      Shape ws = l.type == LayerSpec::Type::conv ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out, l.in};
      const std::size_t fan_in = shape_numel(ws) / l.out;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<double> w(shape_numel(ws));
      for (double& v : w) v = u(rng);
      entries_.emplace_back(l.name + ".weight", Tensor(ws, std::move(w), true));
      entries_.emplace_back(l.name + ".bias", Tensor(Shape{l.out}, 0.0, true));
    }
  }

  NetKind kind() const { return kind_; }

  const Tensor& get(std::string_view name) const {
    counter_.hit();
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw ShapeError("no parameter named " + std::string(name) + " in " + std::string(net_name(kind_)));
  }

  const NamedTensors& entries() const {
    counter_.hit();
    return entries_;
  }
  NamedTensors& entries() {
    counter_.hit();
    return entries_;
  }

  /// Number of times any parameter was looked up through this object or
  /// one of its aliases.
  std::uint64_t reads() const { return counter_.value(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  NetworkParams clone() const {
    NetworkParams out;
    out.kind_ = kind_;
    for (const auto& [n, t] : entries_) {
      Tensor c = t.detach();
      c.set_requires_grad(t.requires_grad());
      out.entries_.emplace_back(n, c);
    }
    return out;
  }

  /// Deep copy that the tape never tracks; used where a network must act as
  /// a fixed function inside another network's objective.
  NetworkParams frozen() const {
    NetworkParams out = clone();
    for (auto& e : out.entries_) e.second.set_requires_grad(false);
    return out;
  }

  /// Overwrite values from `src` (names and shapes must match).
  void assign(const NamedTensors& src, std::string_view prefix = {}) {
    for (auto& [n, t] : entries_) {
      const std::string key = std::string(prefix) + n;
      bool found = false;
      for (const auto& [sn, st] : src) {
        if (sn != key) continue;
        if (st.shape() != t.shape())
          throw DataError("checkpoint: shape mismatch for " + key + ": " + shape_str(st.shape()) +
                          " vs " + shape_str(t.shape()));
        std::copy(st.data().begin(), st.data().end(), t.mutable_data().begin());
        found = true;
        break;
      }
      if (!found) throw DataError("checkpoint: missing parameter " + key);
    }
  }

 private:
  NetKind kind_ = NetKind::contour;
  NamedTensors entries_;
  detail::AccessCounter counter_;
};

namespace detail {

inline Tensor conv_layer(Tape& tape, const NetworkParams& p, const std::string& name, const Tensor& x,
                         std::size_t stride) {
  const Tensor& w = p.get(name + ".weight");
  return conv2d(tape, x, w, p.get(name + ".bias"), stride, w.dim(2) / 2);
}

inline Tensor linear_layer(Tape& tape, const NetworkParams& p, const std::string& name, const Tensor& x) {
  return linear(tape, x, p.get(name + ".weight"), p.get(name + ".bias"));
}

inline void expect_kind(const NetworkParams& p, NetKind k) {
  if (p.kind() != k)
    throw ShapeError("expected " + std::string(net_name(k)) + " parameters, got " +
                     std::string(net_name(p.kind())));
}

}  // namespace detail

/// Fully convolutional encoder-decoder; per-pixel semantic edge probability.
inline Tensor contour_forward(Tape& tape, const NetworkParams& p, const Tensor& image) {
  detail::expect_kind(p, NetKind::contour);
  detail::require(image.rank() == 4 && image.dim(1) == 1, "contour_forward: input must be [N,1,H,W]");
  detail::require(image.dim(2) % 4 == 0 && image.dim(3) % 4 == 0,
                  "contour_forward: spatial dims must be divisible by 4");
  using detail::conv_layer;
  Tensor x = relu(tape, conv_layer(tape, p, "conv1", image, 1));
  x = relu(tape, conv_layer(tape, p, "conv2", x, 2));
  x = relu(tape, conv_layer(tape, p, "conv3", x, 1));
  x = relu(tape, conv_layer(tape, p, "conv4", x, 2));
  x = add(tape, x, relu(tape, conv_layer(tape, p, "res1", x, 1)));
  x = add(tape, x, relu(tape, conv_layer(tape, p, "res2", x, 1)));
  x = relu(tape, conv_layer(tape, p, "up1", upsample_nearest(tape, x, 2), 1));
  x = conv_layer(tape, p, "up2", upsample_nearest(tape, x, 2), 1);
  return sigmoid(tape, x);
}

/// Encodes an image stacked with its edge map into features at 1/8 resolution.
inline Tensor encoder_forward(Tape& tape, const NetworkParams& p, const Tensor& input) {
  detail::expect_kind(p, NetKind::encoder);
  detail::require(input.rank() == 4 && input.dim(1) == 2,
                  "encoder_forward: input must be image+edge map [N,2,H,W], got " + shape_str(input.shape()));
  detail::require(input.dim(2) % 8 == 0 && input.dim(3) % 8 == 0,
                  "encoder_forward: spatial dims must be divisible by 8");
  using detail::conv_layer;
  Tensor x = relu(tape, conv_layer(tape, p, "stem", input, 1));
  x = relu(tape, conv_layer(tape, p, "down1", x, 2));
  x = relu(tape, conv_layer(tape, p, "down2", x, 2));
  x = relu(tape, conv_layer(tape, p, "down3", x, 2));
  return relu(tape, conv_layer(tape, p, "mix", x, 1));
}

/// Per-pixel class logits at 8x the feature resolution.
inline Tensor decoder_forward(Tape& tape, const NetworkParams& p, const Tensor& features) {
  detail::expect_kind(p, NetKind::decoder);
  detail::require(features.rank() == 4, "decoder_forward: features must be rank 4");
  using detail::conv_layer;
  Tensor x = relu(tape, conv_layer(tape, p, "up1", upsample_nearest(tape, features, 2), 1));
  x = relu(tape, conv_layer(tape, p, "up2", upsample_nearest(tape, x, 2), 1));
  x = relu(tape, conv_layer(tape, p, "up3", upsample_nearest(tape, x, 2), 1));
  return conv_layer(tape, p, "head", x, 1);
}

/// One raw domain logit per edge map (source = 1 convention).
inline Tensor edge_disc_forward(Tape& tape, const NetworkParams& p, const Tensor& edge_map,
                                double slope = 0.2) {
  detail::expect_kind(p, NetKind::edge_disc);
  detail::require(edge_map.rank() == 4 && edge_map.dim(1) == 1, "edge_disc_forward: input must be [N,1,H,W]");
  using detail::conv_layer;
  Tensor x = edge_map;
  for (const char* name : {"conv1", "conv2", "conv3", "conv4"})
    x = leaky_relu(tape, conv_layer(tape, p, name, x, 2), slope);
  x = leaky_relu(tape, detail::linear_layer(tape, p, "fc1", flatten(tape, x)), slope);
  return detail::linear_layer(tape, p, "fc2", x);
}

/// One raw domain logit per encoder feature map.
inline Tensor feat_disc_forward(Tape& tape, const NetworkParams& p, const Tensor& features,
                                double slope = 0.2) {
  detail::expect_kind(p, NetKind::feat_disc);
  detail::require(features.rank() == 4, "feat_disc_forward: features must be rank 4");
  using detail::conv_layer;
  Tensor x = leaky_relu(tape, conv_layer(tape, p, "conv1", features, 1), slope);
  x = leaky_relu(tape, conv_layer(tape, p, "conv2", x, 2), slope);
  x = leaky_relu(tape, conv_layer(tape, p, "conv3", x, 2), slope);
  x = leaky_relu(tape, detail::linear_layer(tape, p, "fc1", flatten(tape, x)), slope);
  return detail::linear_layer(tape, p, "fc2", x);
}

}  // namespace edgeuda
