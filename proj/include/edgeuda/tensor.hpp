#pragma once

// Dense double-precision tensors with a recorded-operation tape for
// reverse-mode differentiation. Sized for small convolutional networks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace edgeuda {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or invalid op arguments.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward op or a loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files or datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

/// Shared handle to a tensor buffer. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage>()) {
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  std::vector<double>& buffer() { return s_->data; }
  double operator[](std::size_t i) const { return s_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  std::vector<double>& grad_buffer() const {
    if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
  }
  void zero_grad() { s_->grad.clear(); }

  /// Fresh storage holding a copy of the values; never tracked.
  Tensor detach() const { return Tensor(shape(), s_->data, false); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  std::shared_ptr<TensorStorage> s_;
};

/// Ordered record of differentiable operations. One tape per training run;
/// tapes share nothing, so independent runs may live on different threads.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  static Tape disabled() { return Tape(false); }

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  bool tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
  }

  void record(Tensor output, BackwardFn fn) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(output), std::move(fn)});
  }

  /// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from
  /// `loss`. Intermediate gradients are reset first, so calling this twice
  /// on the same tape adds the leaf gradients twice.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_) n.output.zero_grad();
    Tensor root = loss;
    if (!root.requires_grad()) return;
    root.grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->fn(it->output.grad_buffer());
    }
    for (auto& n : nodes_) n.output.zero_grad();
  }

 private:
  struct Node {
    Tensor output;
    BackwardFn fn;
  };
  bool enabled_ = true;
  std::vector<Node> nodes_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void accumulate(const Tensor& t, std::span<const double> g) {
  auto& buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Products run on Eigen-owned copies. Maps over arbitrary offsets let Eigen
// pick kernels whose rounding depends on the address alignment.
inline void product_into(double* dst, const RowMat& a, const RowMat& b, bool add) {
  const RowMat c = a * b;
  const double* cp = c.data();
  const auto n = static_cast<std::size_t>(c.size());
  if (add)
    for (std::size_t i = 0; i < n; ++i) dst[i] += cp[i];
  else
    for (std::size_t i = 0; i < n; ++i) dst[i] = cp[i];
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
        const double* plane = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
        double* plane = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
}

template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto os = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) os[i] = fwd(xs[i]);
  check_finite(out, name);
  if (tape.tracks({&x})) {
    tape.record(out, [x, out, deriv](const std::vector<double>& g) mutable {
      auto xs = x.data();
      auto os = out.data();
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i], os[i]);
    });
  }
  return out;
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input with OIHW weights.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride, std::size_t padding) {
  using namespace detail;
  require(input.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv2d: bias must be [Cout]");
  require(weight.dim(1) == input.dim(1),
          "conv2d: channel mismatch, input " + shape_str(input.shape()) + " weight " +
              shape_str(weight.shape()));
  require(weight.dim(2) % 2 == 1 && weight.dim(3) % 2 == 1, "conv2d: kernel sizes must be odd");
  require(stride >= 1, "conv2d: stride must be >= 1");
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
             weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw,
          "conv2d: non-positive output dims for input " + shape_str(input.shape()));
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t K = g.k(), P = g.p();
  Tensor out(Shape{g.n, g.cout, g.oh, g.ow});
  std::vector<double> cols(K * P);
  const RowMat W = ConstMap(weight.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.data().data() + n * g.cin * g.h * g.w, g, cols.data());
    double* o_ptr = out.mutable_data().data() + n * g.cout * P;
    product_into(o_ptr, W, ConstMap(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P)), false);
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t q = 0; q < P; ++q) o_ptr[o * P + q] += bias[o];
  }
  check_finite(out, "conv2d");

  if (tape.tracks({&input, &weight, &bias})) {
    tape.record(out, [input, weight, bias, g](const std::vector<double>& grad) mutable {
      const std::size_t K = g.k(), P = g.p();
      const auto Ki = static_cast<Eigen::Index>(K), Pi = static_cast<Eigen::Index>(P),
                 Ci = static_cast<Eigen::Index>(g.cout);
      std::vector<double> cols(K * P), dcols;
      const RowMat Wt = ConstMap(weight.data().data(), Ci, Ki).transpose();
      for (std::size_t n = 0; n < g.n; ++n) {
        const RowMat G = ConstMap(grad.data() + n * g.cout * P, Ci, Pi);
        if (bias.requires_grad()) {
          auto& gb = bias.grad_buffer();
          // Plain loops: Eigen's vectorized sum depends on buffer alignment,
          // which would make gradients differ bit-wise between runs.
          const double* gp = grad.data() + n * g.cout * P;
          for (std::size_t o = 0; o < g.cout; ++o) {
            double acc = 0.0;
            for (std::size_t q = 0; q < P; ++q) acc += gp[o * P + q];
            gb[o] += acc;
          }
        }
        if (weight.requires_grad()) {
          im2col(input.data().data() + n * g.cin * g.h * g.w, g, cols.data());
          product_into(weight.grad_buffer().data(), G, ConstMap(cols.data(), Ki, Pi).transpose(), true);
        }
        if (input.requires_grad()) {
          dcols.resize(K * P);
          product_into(dcols.data(), Wt, G, false);
          col2im_add(dcols.data(), g, input.grad_buffer().data() + n * g.cin * g.h * g.w);
        }
      }
    });
  }
  return out;
}

/// Replicates each pixel into a factor x factor block.
inline Tensor upsample_nearest(Tape& tape, const Tensor& input, std::size_t factor) {
  detail::require(factor >= 1, "upsample_nearest: factor must be >= 1");
  detail::require(input.rank() == 4, "upsample_nearest: input must be rank 4");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out(Shape{input.dim(0), input.dim(1), oh, ow});
  auto in = input.data();
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        o[(p * oh + y) * ow + x] = in[(p * h + y / factor) * w + x / factor];
  if (tape.tracks({&input})) {
    tape.record(out, [input, nc, h, w, factor](const std::vector<double>& g) mutable {
      auto& gi = input.grad_buffer();
      const std::size_t oh = h * factor, ow = w * factor;
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x)
            gi[(p * h + y / factor) * w + x / factor] += g[(p * oh + y) * ow + x];
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(Tape& tape, const Tensor& x, double slope) {
  return detail::unary(
      tape, x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double s) { return s * (1.0 - s); });
}

/// Natural log. Callers clamp inputs to >= 1e-12 beforehand.
inline Tensor log(Tape& tape, const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw NumericalError("log of non-positive value");
  return detail::unary(
      tape, x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Elementwise max(x, floor); gradient passes only where x > floor.
inline Tensor clamp_min(Tape& tape, const Tensor& x, double floor) {
  return detail::unary(
      tape, x, "clamp_min", [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

inline Tensor scale(Tape& tape, const Tensor& x, double s) {
  return detail::unary(
      tape, x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

namespace detail {

template <class Fwd, class Ga, class Gb>
Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Ga ga, Gb gb) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  auto as = a.data(), bs = b.data();
  auto os = out.mutable_data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = fwd(as[i], bs[i]);
  check_finite(out, name);
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, ga, gb](const std::vector<double>& g) mutable {
      auto as = a.data(), bs = b.data();
      if (a.requires_grad()) {
        auto& gA = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gA[i] += g[i] * ga(as[i], bs[i]);
      }
      if (b.requires_grad()) {
        auto& gB = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gB[i] += g[i] * gb(as[i], bs[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

/// Per-pixel softmax over the channel axis of an NCHW tensor.
inline Tensor softmax_channels(Tape& tape, const Tensor& x) {
  detail::require(x.rank() == 4 && x.dim(1) >= 2, "softmax_channels: need [N,C>=2,H,W]");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = b * c * hw + p;
      double mx = in[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, in[base + k * hw]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) z += (o[base + k * hw] = std::exp(in[base + k * hw] - mx));
      for (std::size_t k = 0; k < c; ++k) o[base + k * hw] /= z;
    }
  detail::check_finite(out, "softmax_channels");
  if (tape.tracks({&x})) {
    tape.record(out, [x, out, n, c, hw](const std::vector<double>& g) mutable {
      auto s = out.data();
      auto& gx = x.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t base = b * c * hw + p;
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k) dot += g[base + k * hw] * s[base + k * hw];
          for (std::size_t k = 0; k < c; ++k)
            gx[base + k * hw] += s[base + k * hw] * (g[base + k * hw] - dot);
        }
    });
  }
  return out;
}

/// Channels of `a` followed by channels of `b`.
inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 4 && b.rank() == 4, "concat_channels: inputs must be rank 4");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, o.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, o.data() + i * (ca + cb) * hw + ca * hw);
  }
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, n, ca, cb, hw](const std::vector<double>& g) mutable {
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = g.data() + i * (ca + cb) * hw;
        if (a.requires_grad()) {
          double* d = a.grad_buffer().data() + i * ca * hw;
          for (std::size_t j = 0; j < ca * hw; ++j) d[j] += src[j];
        }
        if (b.requires_grad()) {
          double* d = b.grad_buffer().data() + i * cb * hw;
          for (std::size_t j = 0; j < cb * hw; ++j) d[j] += src[ca * hw + j];
        }
      }
    });
  }
  return out;
}

/// x[N,K] * weight[M,K]^T + bias[M].
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  using namespace detail;
  require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
          "linear: shape mismatch " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "linear: bias must be [M]");
  const auto N = static_cast<Eigen::Index>(x.dim(0)), K = static_cast<Eigen::Index>(x.dim(1)),
             M = static_cast<Eigen::Index>(weight.dim(0));
  Tensor out(Shape{x.dim(0), weight.dim(0)});
  product_into(out.mutable_data().data(), ConstMap(x.data().data(), N, K),
               ConstMap(weight.data().data(), M, K).transpose(), false);
  MutMap O(out.mutable_data().data(), N, M);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < M; ++j) O(i, j) += bias[static_cast<std::size_t>(j)];
  check_finite(out, "linear");
  if (tape.tracks({&x, &weight, &bias})) {
    tape.record(out, [x, weight, bias, N, K, M](const std::vector<double>& g) mutable {
      ConstMap G(g.data(), N, M);
      if (x.requires_grad())
        product_into(x.grad_buffer().data(), G, ConstMap(weight.data().data(), M, K), true);
      if (weight.requires_grad())
        product_into(weight.grad_buffer().data(), G.transpose(), ConstMap(x.data().data(), N, K), true);
      if (bias.requires_grad()) {
        auto& gb = bias.grad_buffer();
        for (Eigen::Index j = 0; j < M; ++j) {
          double acc = 0.0;
          for (Eigen::Index i = 0; i < N; ++i) acc += G(i, j);
          gb[static_cast<std::size_t>(j)] += acc;
        }
      }
    });
  }
  return out;
}

/// Same values with a new shape of equal element count.
inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tape.tracks({&x})) {
    tape.record(out, [x](const std::vector<double>& g) mutable { detail::accumulate(x, g); });
  }
  return out;
}

inline Tensor flatten(Tape& tape, const Tensor& x) {
  detail::require(x.rank() >= 1, "flatten: rank-0 input");
  return reshape(tape, x, Shape{x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

/// Arithmetic mean of all entries as a rank-0 tensor.
inline Tensor mean(Tape& tape, const Tensor& x) {
  detail::require(x.numel() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s / static_cast<double>(x.numel()));
  detail::check_finite(out, "mean");
  if (tape.tracks({&x})) {
    tape.record(out, [x](const std::vector<double>& g) mutable {
      auto& gx = x.grad_buffer();
      const double d = g[0] / static_cast<double>(gx.size());
      for (double& v : gx) v += d;
    });
  }
  return out;
}

/// In-place SGD with momentum: v <- momentum*v + grad; p <- p - lr*v.
inline void sgd_momentum_step(Tensor& param, std::vector<double>& velocity, double lr, double momentum) {
  if (!(lr > 0.0)) throw ConfigError("sgd_momentum_step: learning rate must be > 0");
  auto p = param.mutable_data();
  if (velocity.size() != p.size()) velocity.assign(p.size(), 0.0);
  if (!param.has_grad()) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      velocity[i] = momentum * velocity[i];
      p[i] -= lr * velocity[i];
    }
    return;
  }
  auto g = param.grad();
  for (std::size_t i = 0; i < p.size(); ++i) {
    velocity[i] = momentum * velocity[i] + g[i];
    p[i] -= lr * velocity[i];
  }
}

}  // namespace edgeuda
