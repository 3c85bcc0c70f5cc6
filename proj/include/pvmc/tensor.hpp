#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pvmc/errors.hpp"

// Minimal reverse-mode autodiff over dense N-D tensors. Reductions use a
// fixed serial summation order so repeated runs are bit-identical. No
// broadcasting beyond scalar-tensor.

namespace pvmc::ad {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor<T>> inputs;
  std::function<void(Node<T>&)> backprop;  // null for leaves
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, T fill, bool requires_grad = false) {
    n_ = std::make_shared<detail::Node<T>>();
    n_->shape = std::move(shape);
    n_->value.assign(static_cast<std::size_t>(numel_of(n_->shape)), fill);
    n_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ModelError("Tensor::from_data: data length does not match shape");
    Tensor t;
    t.n_ = std::make_shared<detail::Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, v, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return numel_of(n_->shape); }
  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return !n_->backprop; }

  T item() const {
    if (numel() != 1) throw UsageError("Tensor::item: tensor is not scalar");
    return n_->value[0];
  }

  std::vector<T>& grad() {
    if (n_->grad.size() != n_->value.size())
      n_->grad.assign(n_->value.size(), T(0));
    return n_->grad;
  }
  const std::vector<T>& grad() const { return n_->grad; }
  bool has_grad() const { return n_->grad.size() == n_->value.size(); }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  std::shared_ptr<detail::Node<T>> n_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, const char* op,
                      std::vector<Tensor<T>> inputs) {
  Tensor<T> t(std::move(shape), T(0));
  t.n_->op = op;
  bool req = false;
  for (const auto& in : inputs) req = req || in.requires_grad();
  t.n_->requires_grad = req;
  if (req) t.n_->inputs = std::move(inputs);
  return t;
}

template <class T>
void ensure_grad(Node<T>& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ModelError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (scalar-tensor broadcast allowed on either side)

namespace detail {

enum class BinKind { add, sub, mul, div };

template <class T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind,
                    const char* name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ModelError(std::string(name) + ": shape mismatch");

  const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  Tensor<T> out = make_result<T>(out_shape, name, {a, b});
  const std::size_t n = out.data().size();
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    switch (kind) {
      case BinKind::add: ov[i] = x + y; break;
      case BinKind::sub: ov[i] = x - y; break;
      case BinKind::mul: ov[i] = x * y; break;
      case BinKind::div: ov[i] = x / y; break;
    }
  }
  if (!out.requires_grad()) return out;

  out.n_->backprop = [kind, a_scalar, b_scalar, n](Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    Tensor<T>& tb = self.inputs[1];
    const auto& g = self.grad;
    const auto& av2 = ta.data();
    const auto& bv2 = tb.data();
    if (ta.requires_grad()) {
      ensure_grad(*ta.n_);
      auto& ga = ta.n_->grad;
      for (std::size_t i = 0; i < n; ++i) {
        T d{};
        switch (kind) {
          case BinKind::add:
          case BinKind::sub: d = g[i]; break;
          case BinKind::mul: d = g[i] * bv2[b_scalar ? 0 : i]; break;
          case BinKind::div: d = g[i] / bv2[b_scalar ? 0 : i]; break;
        }
        ga[a_scalar ? 0 : i] += d;
      }
    }
    if (tb.requires_grad()) {
      ensure_grad(*tb.n_);
      auto& gb = tb.n_->grad;
      for (std::size_t i = 0; i < n; ++i) {
        const T x = av2[a_scalar ? 0 : i];
        const T y = bv2[b_scalar ? 0 : i];
        T d{};
        switch (kind) {
          case BinKind::add: d = g[i]; break;
          case BinKind::sub: d = -g[i]; break;
          case BinKind::mul: d = g[i] * x; break;
          case BinKind::div: d = -g[i] * x / (y * y); break;
        }
        gb[b_scalar ? 0 : i] += d;
      }
    }
  };
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::mul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::div, "div");
}

/// out = c * a for a plain constant c (not a graph node).
template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, double c) {
  Tensor<T> out = detail::make_result<T>(a.shape(), "scalar_mul", {a});
  const std::size_t n = out.data().size();
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = static_cast<T>(c) * a.data()[i];
  if (!out.requires_grad()) return out;
  out.n_->backprop = [c, n](detail::Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    detail::ensure_grad(*ta.n_);
    for (std::size_t i = 0; i < n; ++i)
      ta.n_->grad[i] += static_cast<T>(c) * self.grad[i];
  };
  return out;
}

/// out = a + c for a plain constant c.
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  Tensor<T> out = detail::make_result<T>(a.shape(), "add_scalar", {a});
  const std::size_t n = out.data().size();
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] + static_cast<T>(c);
  if (!out.requires_grad()) return out;
  out.n_->backprop = [n](detail::Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    detail::ensure_grad(*ta.n_);
    for (std::size_t i = 0; i < n; ++i) ta.n_->grad[i] += self.grad[i];
  };
  return out;
}

// ---------------------------------------------------------------------------
// reductions and elementwise unary ops

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = detail::make_result<T>(Shape{1}, "sum", {a});
  T acc = T(0);
  for (const T v : a.data()) acc += v;  // fixed ascending order
  out.data()[0] = acc;
  if (!out.requires_grad()) return out;
  out.n_->backprop = [](detail::Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    detail::ensure_grad(*ta.n_);
    const T g = self.grad[0];
    for (auto& gi : ta.n_->grad) gi += g;
  };
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const std::size_t n = a.data().size();
  Tensor<T> out = detail::make_result<T>(Shape{1}, "mean", {a});
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  out.data()[0] = acc / static_cast<T>(n);
  if (!out.requires_grad()) return out;
  out.n_->backprop = [n](detail::Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    detail::ensure_grad(*ta.n_);
    const T g = self.grad[0] / static_cast<T>(n);
    for (auto& gi : ta.n_->grad) gi += g;
  };
  return out;
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, F f, DF df) {
  Tensor<T> out = make_result<T>(a.shape(), name, {a});
  const std::size_t n = out.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = f(a.data()[i]);
  if (!out.requires_grad()) return out;
  out.n_->backprop = [df, n](Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    ensure_grad(*ta.n_);
    for (std::size_t i = 0; i < n; ++i)
      ta.n_->grad[i] += self.grad[i] * df(ta.data()[i], self.value[i]);
  };
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(
      a, "square", [](T x) { return x * x; },
      [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op(
      a, "sqrt", [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

/// d|x|/dx at 0 is defined as 0 (subgradient choice shared with the
/// closed-form PVMC gradient).
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_op(
      a, "abs", [](T x) { return x < T(0) ? -x : x; },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// structural ops

/// Concatenate along the channel axis of NCHW tensors.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 4 || b.shape().size() != 4)
    throw ModelError("concat_channels: expected NCHW tensors");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ModelError("concat_channels: incompatible shapes");
  const int n = sa[0], ca = sa[1], cb = sb[1], h = sa[2], w = sa[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out =
      detail::make_result<T>(Shape{n, ca + cb, h, w}, "concat", {a, b});
  for (int ni = 0; ni < n; ++ni) {
    T* dst = out.data().data() + static_cast<std::size_t>(ni) * (ca + cb) * plane;
    const T* pa = a.data().data() + static_cast<std::size_t>(ni) * ca * plane;
    const T* pb = b.data().data() + static_cast<std::size_t>(ni) * cb * plane;
    std::copy(pa, pa + ca * plane, dst);
    std::copy(pb, pb + cb * plane, dst + ca * plane);
  }
  if (!out.requires_grad()) return out;
  out.n_->backprop = [n, ca, cb, plane](detail::Node<T>& self) {
    Tensor<T>& ta = self.inputs[0];
    Tensor<T>& tb = self.inputs[1];
    for (int ni = 0; ni < n; ++ni) {
      const T* g = self.grad.data() + static_cast<std::size_t>(ni) * (ca + cb) * plane;
      if (ta.requires_grad()) {
        detail::ensure_grad(*ta.n_);
        T* ga = ta.n_->grad.data() + static_cast<std::size_t>(ni) * ca * plane;
        for (std::size_t i = 0; i < static_cast<std::size_t>(ca) * plane; ++i)
          ga[i] += g[i];
      }
      if (tb.requires_grad()) {
        detail::ensure_grad(*tb.n_);
        T* gb = tb.n_->grad.data() + static_cast<std::size_t>(ni) * cb * plane;
        for (std::size_t i = 0; i < static_cast<std::size_t>(cb) * plane; ++i)
          gb[i] += g[ca * plane + i];
      }
    }
  };
  return out;
}

/// Extract an (sy, sx) patch from batch item n, channel c of an NCHW tensor.
template <class T>
Tensor<T> slice_patch(const Tensor<T>& x, int n, int c, int y0, int x0, int sy,
                      int sx) {
  if (x.shape().size() != 4) throw ModelError("slice_patch: expected NCHW");
  const Shape& s = x.shape();
  if (n < 0 || n >= s[0] || c < 0 || c >= s[1] || y0 < 0 || x0 < 0 ||
      y0 + sy > s[2] || x0 + sx > s[3])
    throw ConfigError("slice_patch: patch exceeds tensor bounds");
  const int h = s[2], w = s[3];
  const std::size_t base =
      ((static_cast<std::size_t>(n) * s[1]) + c) * h * static_cast<std::size_t>(w);
  Tensor<T> out = detail::make_result<T>(Shape{sy, sx}, "slice", {x});
  for (int yy = 0; yy < sy; ++yy) {
    const T* src = x.data().data() + base + static_cast<std::size_t>(y0 + yy) * w + x0;
    std::copy(src, src + sx, out.data().data() + static_cast<std::size_t>(yy) * sx);
  }
  if (!out.requires_grad()) return out;
  out.n_->backprop = [base, w, y0, x0, sy, sx](detail::Node<T>& self) {
    Tensor<T>& tx = self.inputs[0];
    detail::ensure_grad(*tx.n_);
    for (int yy = 0; yy < sy; ++yy) {
      T* dst = tx.n_->grad.data() + base + static_cast<std::size_t>(y0 + yy) * w + x0;
      const T* g = self.grad.data() + static_cast<std::size_t>(yy) * sx;
      for (int xx = 0; xx < sx; ++xx) dst[xx] += g[xx];
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling

/// 2-D convolution, stride 1, same padding, odd square kernels.
/// x: {N,C,H,W}, weight: {O,C,kh,kw}, bias: {O}.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  if (x.shape().size() != 4 || weight.shape().size() != 4 ||
      bias.shape().size() != 1)
    throw ModelError("conv2d: expected x{N,C,H,W}, w{O,C,kh,kw}, b{O}");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
            W = x.shape()[3];
  const int O = weight.shape()[0], kh = weight.shape()[2],
            kw = weight.shape()[3];
  if (weight.shape()[1] != C) throw ModelError("conv2d: channel mismatch");
  if (bias.shape()[0] != O) throw ModelError("conv2d: bias size mismatch");
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ModelError("conv2d: kernel dims must be odd");
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  Tensor<T> out = detail::make_result<T>(Shape{N, O, H, W}, "conv2d",
                                         {x, weight, bias});
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  const T* bp = bias.data().data();
  T* op = out.data().data();

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      T* outp = op + (static_cast<std::size_t>(n) * O + o) * plane;
      const T bv = bp[o];
      for (std::size_t i = 0; i < plane; ++i) outp[i] = bv;
      for (int c = 0; c < C; ++c) {
        const T* inp = xp + (static_cast<std::size_t>(n) * C + c) * plane;
        const T* wrow = wp + ((static_cast<std::size_t>(o) * C + c) * kh) * kw;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = wrow[ky * kw + kx];
            if (wv == T(0)) continue;
            const int dy = ky - ph, dx = kx - pw;
            const int y_lo = std::max(0, -dy), y_hi = std::min(H, H - dy);
            const int x_lo = std::max(0, -dx), x_hi = std::min(W, W - dx);
            for (int y = y_lo; y < y_hi; ++y) {
              T* orow = outp + static_cast<std::size_t>(y) * W;
              const T* irow = inp + static_cast<std::size_t>(y + dy) * W + dx;
              for (int xi = x_lo; xi < x_hi; ++xi) orow[xi] += wv * irow[xi];
            }
          }
        }
      }
    }
  }
  if (!out.requires_grad()) return out;

  out.n_->backprop = [N, C, H, W, O, kh, kw, ph, pw, plane](detail::Node<T>& self) {
    Tensor<T>& tx = self.inputs[0];
    Tensor<T>& tw = self.inputs[1];
    Tensor<T>& tb = self.inputs[2];
    const T* g = self.grad.data();
    const T* xp2 = tx.data().data();
    const T* wp2 = tw.data().data();

    if (tx.requires_grad()) {
      detail::ensure_grad(*tx.n_);
      T* gx = tx.n_->grad.data();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          T* gxp = gx + (static_cast<std::size_t>(n) * C + c) * plane;
          for (int o = 0; o < O; ++o) {
            const T* gop = g + (static_cast<std::size_t>(n) * O + o) * plane;
            const T* wrow = wp2 + ((static_cast<std::size_t>(o) * C + c) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const T wv = wrow[ky * kw + kx];
                if (wv == T(0)) continue;
                const int dy = ky - ph, dx = kx - pw;
                const int y_lo = std::max(0, -dy), y_hi = std::min(H, H - dy);
                const int x_lo = std::max(0, -dx), x_hi = std::min(W, W - dx);
                for (int y = y_lo; y < y_hi; ++y) {
                  const T* grow = gop + static_cast<std::size_t>(y) * W;
                  T* xrow = gxp + static_cast<std::size_t>(y + dy) * W + dx;
                  for (int xi = x_lo; xi < x_hi; ++xi)
                    xrow[xi] += wv * grow[xi];
                }
              }
            }
          }
        }
      }
    }
    if (tw.requires_grad()) {
      detail::ensure_grad(*tw.n_);
      T* gw = tw.n_->grad.data();
      for (int o = 0; o < O; ++o) {
        for (int c = 0; c < C; ++c) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const int dy = ky - ph, dx = kx - pw;
              const int y_lo = std::max(0, -dy), y_hi = std::min(H, H - dy);
              const int x_lo = std::max(0, -dx), x_hi = std::min(W, W - dx);
              T acc = T(0);
              for (int n = 0; n < N; ++n) {
                const T* gop = g + (static_cast<std::size_t>(n) * O + o) * plane;
                const T* inp = xp2 + (static_cast<std::size_t>(n) * C + c) * plane;
                for (int y = y_lo; y < y_hi; ++y) {
                  const T* grow = gop + static_cast<std::size_t>(y) * W;
                  const T* irow = inp + static_cast<std::size_t>(y + dy) * W + dx;
                  for (int xi = x_lo; xi < x_hi; ++xi)
                    acc += grow[xi] * irow[xi];
                }
              }
              gw[((static_cast<std::size_t>(o) * C + c) * kh + ky) * kw + kx] += acc;
            }
          }
        }
      }
    }
    if (tb.requires_grad()) {
      detail::ensure_grad(*tb.n_);
      T* gb = tb.n_->grad.data();
      for (int o = 0; o < O; ++o) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
          const T* gop = g + (static_cast<std::size_t>(n) * O + o) * plane;
          for (std::size_t i = 0; i < plane; ++i) acc += gop[i];
        }
        gb[o] += acc;
      }
    }
  };
  return out;
}

/// Transposed 2-D convolution with stride 2 and a 2x2 kernel (the U-Net
/// upsampling step). x: {N,C,H,W}, weight: {C,O,2,2}, bias: {O};
/// output {N,O,2H,2W}.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias) {
  if (x.shape().size() != 4 || weight.shape().size() != 4 ||
      bias.shape().size() != 1)
    throw ModelError("conv_transpose2d: expected x{N,C,H,W}, w{C,O,2,2}, b{O}");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
            W = x.shape()[3];
  const int O = weight.shape()[1];
  if (weight.shape()[0] != C || weight.shape()[2] != 2 || weight.shape()[3] != 2)
    throw ModelError("conv_transpose2d: weight must be {C,O,2,2}");
  if (bias.shape()[0] != O)
    throw ModelError("conv_transpose2d: bias size mismatch");
  const int Ho = 2 * H, Wo = 2 * W;
  const std::size_t iplane = static_cast<std::size_t>(H) * W;
  const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;

  Tensor<T> out = detail::make_result<T>(Shape{N, O, Ho, Wo}, "conv_t2d",
                                         {x, weight, bias});
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  const T* bp = bias.data().data();
  T* op = out.data().data();

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      T* outp = op + (static_cast<std::size_t>(n) * O + o) * oplane;
      const T bv = bp[o];
      for (std::size_t i = 0; i < oplane; ++i) outp[i] = bv;
      for (int c = 0; c < C; ++c) {
        const T* inp = xp + (static_cast<std::size_t>(n) * C + c) * iplane;
        const T* wrow = wp + (static_cast<std::size_t>(c) * O + o) * 4;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const T wv = wrow[dy * 2 + dx];
            for (int y = 0; y < H; ++y) {
              const T* irow = inp + static_cast<std::size_t>(y) * W;
              T* orow = outp + static_cast<std::size_t>(2 * y + dy) * Wo + dx;
              for (int xi = 0; xi < W; ++xi) orow[2 * xi] += wv * irow[xi];
            }
          }
        }
      }
    }
  }
  if (!out.requires_grad()) return out;

  out.n_->backprop = [N, C, H, W, O, Wo, iplane, oplane](detail::Node<T>& self) {
    Tensor<T>& tx = self.inputs[0];
    Tensor<T>& tw = self.inputs[1];
    Tensor<T>& tb = self.inputs[2];
    const T* g = self.grad.data();
    const T* xp2 = tx.data().data();
    const T* wp2 = tw.data().data();

    if (tx.requires_grad()) {
      detail::ensure_grad(*tx.n_);
      T* gx = tx.n_->grad.data();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          T* gxp = gx + (static_cast<std::size_t>(n) * C + c) * iplane;
          for (int o = 0; o < O; ++o) {
            const T* gop = g + (static_cast<std::size_t>(n) * O + o) * oplane;
            const T* wrow = wp2 + (static_cast<std::size_t>(c) * O + o) * 4;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const T wv = wrow[dy * 2 + dx];
                for (int y = 0; y < H; ++y) {
                  const T* grow = gop + static_cast<std::size_t>(2 * y + dy) * Wo + dx;
                  T* xrow = gxp + static_cast<std::size_t>(y) * W;
                  for (int xi = 0; xi < W; ++xi) xrow[xi] += wv * grow[2 * xi];
                }
              }
            }
          }
        }
      }
    }
    if (tw.requires_grad()) {
      detail::ensure_grad(*tw.n_);
      T* gw = tw.n_->grad.data();
      for (int c = 0; c < C; ++c) {
        for (int o = 0; o < O; ++o) {
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              T acc = T(0);
              for (int n = 0; n < N; ++n) {
                const T* inp = xp2 + (static_cast<std::size_t>(n) * C + c) * iplane;
                const T* gop = g + (static_cast<std::size_t>(n) * O + o) * oplane;
                for (int y = 0; y < H; ++y) {
                  const T* irow = inp + static_cast<std::size_t>(y) * W;
                  const T* grow = gop + static_cast<std::size_t>(2 * y + dy) * Wo + dx;
                  for (int xi = 0; xi < W; ++xi) acc += irow[xi] * grow[2 * xi];
                }
              }
              gw[(static_cast<std::size_t>(c) * O + o) * 4 + dy * 2 + dx] += acc;
            }
          }
        }
      }
    }
    if (tb.requires_grad()) {
      detail::ensure_grad(*tb.n_);
      T* gb = tb.n_->grad.data();
      for (int o = 0; o < O; ++o) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
          const T* gop = g + (static_cast<std::size_t>(n) * O + o) * oplane;
          for (std::size_t i = 0; i < oplane; ++i) acc += gop[i];
        }
        gb[o] += acc;
      }
    }
  };
  return out;
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan
/// order so backward is deterministic.
template <class T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  if (x.shape().size() != 4) throw ModelError("maxpool2x2: expected NCHW");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
            W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw ModelError("maxpool2x2: spatial dims must be even");
  const int Ho = H / 2, Wo = W / 2;
  const std::size_t iplane = static_cast<std::size_t>(H) * W;
  const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;

  Tensor<T> out = detail::make_result<T>(Shape{N, C, Ho, Wo}, "maxpool", {x});
  std::vector<std::size_t> argmax(static_cast<std::size_t>(N) * C * oplane);
  const T* xp = x.data().data();
  T* op = out.data().data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t ibase = (static_cast<std::size_t>(n) * C + c) * iplane;
      const std::size_t obase = (static_cast<std::size_t>(n) * C + c) * oplane;
      for (int y = 0; y < Ho; ++y) {
        for (int xz = 0; xz < Wo; ++xz) {
          const std::size_t i00 = ibase + static_cast<std::size_t>(2 * y) * W + 2 * xz;
          std::size_t best = i00;
          T bv = xp[i00];
          const std::size_t cand[3] = {i00 + 1, i00 + W, i00 + W + 1};
          for (std::size_t k = 0; k < 3; ++k) {
            if (xp[cand[k]] > bv) {
              bv = xp[cand[k]];
              best = cand[k];
            }
          }
          op[obase + static_cast<std::size_t>(y) * Wo + xz] = bv;
          argmax[obase + static_cast<std::size_t>(y) * Wo + xz] = best;
        }
      }
    }
  }
  if (!out.requires_grad()) return out;
  out.n_->backprop = [argmax = std::move(argmax)](detail::Node<T>& self) {
    Tensor<T>& tx = self.inputs[0];
    detail::ensure_grad(*tx.n_);
    T* gx = tx.n_->grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[argmax[i]] += self.grad[i];
  };
  return out;
}

// ---------------------------------------------------------------------------
// backward driver

/// Reverse-mode sweep from a scalar loss. Parameter (leaf) gradients
/// accumulate across calls; intermediate gradients are reset per call.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined tensor");
  if (loss.numel() != 1) throw UsageError("backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  // iterative post-order DFS; reverse post-order is a topological order
  std::vector<detail::Node<T>*> order;
  std::unordered_set<const detail::Node<T>*> seen;
  struct Frame {
    detail::Node<T>* node;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.n_.get(), 0});
  seen.insert(loss.n_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->inputs.size()) {
      detail::Node<T>* child = f.node->inputs[f.next_child].n_.get();
      ++f.next_child;
      if (child->requires_grad && seen.insert(child).second)
        stack.push_back({child, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (detail::Node<T>* n : order) {
    if (n->backprop) {
      n->grad.assign(n->value.size(), T(0));  // intermediate: fresh per sweep
    } else {
      detail::ensure_grad(*n);  // leaf: keep accumulating
    }
  }
  loss.n_->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace pvmc::ad
