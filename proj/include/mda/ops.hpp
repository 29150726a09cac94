#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "mda/tensor.hpp"

// Differentiable kernels. Feature maps are NHWC ([N,H,W,C]), conv kernels
// [kh,kw,Cin,Cout]. All kernels are single-threaded and accumulate in a fixed
// order, so results are bit-reproducible for identical inputs and seeds.
namespace mda {

enum class Padding { kSame, kValid };
enum class Axis2D { kHeight, kWidth };

namespace detail {

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " +
                     shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

// --- elementwise arithmetic (exact shape match; no silent broadcasting) ---

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
        }
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "div");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / bv[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (std::size_t i = 0; i < gb.size(); ++i)
            gb[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
        }
      });
}

// out = scale * x + shift, elementwise with scalar coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, double scale, double shift) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(scale) * xv[i] + static_cast<T>(shift);
  return Tensor<T>::op_output(
      x.shape(), std::move(out), {x}, [x, scale](TensorNode<T>& self) {
        if (x.requires_grad()) {
          auto& gx = x.mutable_grad();
          for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += static_cast<T>(scale) * self.grad[i];
        }
      });
}

// --- restricted broadcasting: bias-add and channel/spatial rescale ---
//
// b's shape must match a's rank with every extent equal to a's or 1.
// Anything else is a shape error by design; silent broadcasting has bitten
// attention code before.

namespace detail {

inline std::vector<std::int64_t> broadcast_strides(const Shape& a, const Shape& b,
                                                   const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": ranks differ, " + shape_str(a) +
                     " vs " + shape_str(b));
  }
  std::vector<std::int64_t> strides(b.size());
  std::int64_t s = 1;
  for (int d = static_cast<int>(b.size()) - 1; d >= 0; --d) {
    strides[static_cast<std::size_t>(d)] = s;
    s *= b[static_cast<std::size_t>(d)];
  }
  for (std::size_t d = 0; d < b.size(); ++d) {
    if (b[d] == a[d]) continue;
    if (b[d] == 1) {
      strides[d] = 0;
      continue;
    }
    throw ShapeError(std::string(op) + ": axis " + std::to_string(d) +
                     " extent " + std::to_string(b[d]) +
                     " cannot rescale extent " + std::to_string(a[d]));
  }
  return strides;
}

// Walks a's flat index space once, yielding the matching b index.
template <typename Fn>
void for_each_broadcast(const Shape& a, const std::vector<std::int64_t>& bstrides,
                        Fn&& fn) {
  const std::size_t rank = a.size();
  std::vector<std::int64_t> digit(rank, 0);
  std::int64_t n = shape_numel(a);
  std::int64_t bi = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, bi);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++digit[du];
      bi += bstrides[du];
      if (digit[du] < a[du]) break;
      bi -= bstrides[du] * a[du];
      digit[du] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> badd(const Tensor<T>& a, const Tensor<T>& b) {
  auto bstr = detail::broadcast_strides(a.shape(), b.shape(), "badd");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  detail::for_each_broadcast(a.shape(), bstr,
                             [&](std::int64_t i, std::int64_t bi) { out[i] = av[i] + bv[bi]; });
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b, bstr](TensorNode<T>& self) {
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          detail::for_each_broadcast(
              a.shape(), bstr,
              [&](std::int64_t i, std::int64_t bi) { gb[bi] += self.grad[i]; });
        }
      });
}

template <typename T>
Tensor<T> bmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto bstr = detail::broadcast_strides(a.shape(), b.shape(), "bmul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  detail::for_each_broadcast(a.shape(), bstr, [&](std::int64_t i, std::int64_t bi) {
    out[i] = av[i] * bv[bi];
  });
  return Tensor<T>::op_output(
      a.shape(), std::move(out), {a, b}, [a, b, bstr](TensorNode<T>& self) {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          detail::for_each_broadcast(a.shape(), bstr,
                                     [&](std::int64_t i, std::int64_t bi) {
                                       ga[i] += self.grad[i] * bv[bi];
                                     });
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          detail::for_each_broadcast(a.shape(), bstr,
                                     [&](std::int64_t i, std::int64_t bi) {
                                       gb[bi] += self.grad[i] * av[i];
                                     });
        }
      });
}

// --- convolutions ---

// Cross-correlation of x[N,H,W,Cin] with kernel[kh,kw,Cin,Cout] plus bias.
// kSame uses ceil(dim/stride) outputs with the shortfall padded begin=total/2;
// kValid requires the kernel to fit.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Padding padding = Padding::kSame, int stride = 1) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  const std::int64_t N = xs[0], H = xs[1], W = xs[2], Cin = xs[3];
  const std::int64_t KH = ks[0], KW = ks[1], Cout = ks[3];
  if (ks[2] != Cin) {
    throw ShapeError("conv2d: input channel axis (3) extent " + std::to_string(Cin) +
                     " != kernel Cin axis (2) extent " + std::to_string(ks[2]));
  }
  if (bias.dim(0) != Cout) {
    throw ShapeError("conv2d: bias extent " + std::to_string(bias.dim(0)) +
                     " != kernel Cout axis (3) extent " + std::to_string(Cout));
  }

  std::int64_t OH, OW, pad_top, pad_left;
  if (padding == Padding::kSame) {
    OH = (H + stride - 1) / stride;
    OW = (W + stride - 1) / stride;
    pad_top = std::max<std::int64_t>(0, ((OH - 1) * stride + KH - H)) / 2;
    pad_left = std::max<std::int64_t>(0, ((OW - 1) * stride + KW - W)) / 2;
  } else {
    if (H < KH || W < KW) {
      throw ShapeError("conv2d: valid padding needs input >= kernel, got input " +
                       shape_str(xs) + " kernel " + shape_str(ks));
    }
    OH = (H - KH) / stride + 1;
    OW = (W - KW) / stride + 1;
    pad_top = 0;
    pad_left = 0;
  }

  Shape os{N, OH, OW, Cout};
  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  const T* __restrict__ xp = x.values().data();
  const T* __restrict__ kp = kernel.values().data();
  const T* __restrict__ bp = bias.values().data();
  T* __restrict__ op = out.data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        T* __restrict__ acc = op + idx4(os, n, oh, ow, 0);
        for (std::int64_t co = 0; co < Cout; ++co) acc[co] = bp[co];
        for (std::int64_t kh = 0; kh < KH; ++kh) {
          const std::int64_t ih = oh * stride - pad_top + kh;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t kw = 0; kw < KW; ++kw) {
            const std::int64_t iw = ow * stride - pad_left + kw;
            if (iw < 0 || iw >= W) continue;
            const T* __restrict__ xrow = xp + idx4(xs, n, ih, iw, 0);
            const T* __restrict__ krow = kp + ((kh * KW + kw) * Cin) * Cout;
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
              const T xv = xrow[ci];
              const T* __restrict__ kc = krow + ci * Cout;
              for (std::int64_t co = 0; co < Cout; ++co) {
                acc[co] += xv * kc[co];
              }
            }
          }
        }
      }
    }
  }

  auto backward = [x, kernel, bias, os, pad_top, pad_left, stride](TensorNode<T>& self) {
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    const std::int64_t N = xs[0], H = xs[1], W = xs[2], Cin = xs[3];
    const std::int64_t KH = ks[0], KW = ks[1], Cout = ks[3];
    const std::int64_t OH = os[1], OW = os[2];
    const T* gp = self.grad.data();
    const T* xp = x.values().data();
    const T* kp = kernel.values().data();
    const bool need_x = x.requires_grad();
    const bool need_k = kernel.requires_grad();
    const bool need_b = bias.requires_grad();
    T* gx = nullptr;
    T* gk = nullptr;
    T* gb = nullptr;
    if (need_x) gx = x.mutable_grad().data();
    if (need_k) gk = kernel.mutable_grad().data();
    if (need_b) gb = bias.mutable_grad().data();

    if (need_b) {
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const T* grow = gp + idx4(os, n, oh, ow, 0);
            for (std::int64_t co = 0; co < Cout; ++co) gb[co] += grow[co];
          }
    }
    if (!need_x && !need_k) return;
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          const T* grow = gp + idx4(os, n, oh, ow, 0);
          for (std::int64_t kh = 0; kh < KH; ++kh) {
            const std::int64_t ih = oh * stride - pad_top + kh;
            if (ih < 0 || ih >= H) continue;
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const std::int64_t iw = ow * stride - pad_left + kw;
              if (iw < 0 || iw >= W) continue;
              const T* krow = kp + ((kh * KW + kw) * Cin) * Cout;
              const T* xrow = xp + idx4(xs, n, ih, iw, 0);
              if (need_k) {
                T* gkrow = gk + ((kh * KW + kw) * Cin) * Cout;
                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                  const T xv = xrow[ci];
                  T* gkc = gkrow + ci * Cout;
                  for (std::int64_t co = 0; co < Cout; ++co) gkc[co] += xv * grow[co];
                }
              }
              if (need_x) {
                T* gxrow = gx + idx4(xs, n, ih, iw, 0);
                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                  const T* kc = krow + ci * Cout;
                  T s = T(0);
                  for (std::int64_t co = 0; co < Cout; ++co) s += grow[co] * kc[co];
                  gxrow[ci] += s;
                }
              }
            }
          }
        }
      }
    }
  };

  return Tensor<T>::op_output(os, std::move(out), {x, kernel, bias}, backward);
}

// Per-channel 1D squeeze: collapses the chosen spatial axis to 1 by a dot
// product with one filter column per channel. No cross-channel mixing.
template <typename T>
Tensor<T> depthwise_axis_conv(const Tensor<T>& x, const Tensor<T>& filter,
                              const Tensor<T>& bias, Axis2D axis) {
  require_rank(x, 4, "depthwise_axis_conv", "input");
  require_rank(filter, 2, "depthwise_axis_conv", "filter");
  require_rank(bias, 1, "depthwise_axis_conv", "bias");
  const Shape& xs = x.shape();
  const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  const std::int64_t axis_len = axis == Axis2D::kHeight ? H : W;
  if (filter.dim(0) != axis_len) {
    throw ShapeError("depthwise_axis_conv: filter length " +
                     std::to_string(filter.dim(0)) + " != " +
                     (axis == Axis2D::kHeight ? std::string("height") : std::string("width")) +
                     " extent " + std::to_string(axis_len));
  }
  if (filter.dim(1) != C || bias.dim(0) != C) {
    throw ShapeError("depthwise_axis_conv: filter/bias channel extent must be " +
                     std::to_string(C));
  }

  const Shape os = axis == Axis2D::kHeight ? Shape{N, 1, W, C} : Shape{N, H, 1, C};
  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  const T* xp = x.values().data();
  const T* fp = filter.values().data();
  const T* bp = bias.values().data();
  const Shape fs = filter.shape();
  if (axis == Axis2D::kHeight) {
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t c = 0; c < C; ++c) {
          T s = bp[c];
          for (std::int64_t h = 0; h < H; ++h)
            s += fp[idx2(fs, h, c)] * xp[idx4(xs, n, h, w, c)];
          out[static_cast<std::size_t>(idx4(os, n, 0, w, c))] = s;
        }
  } else {
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t c = 0; c < C; ++c) {
          T s = bp[c];
          for (std::int64_t w = 0; w < W; ++w)
            s += fp[idx2(fs, w, c)] * xp[idx4(xs, n, h, w, c)];
          out[static_cast<std::size_t>(idx4(os, n, h, 0, c))] = s;
        }
  }

  auto backward = [x, filter, bias, axis, os](TensorNode<T>& self) {
    const Shape& xs = x.shape();
    const Shape fs = filter.shape();
    const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const T* gp = self.grad.data();
    const T* xp = x.values().data();
    const T* fp = filter.values().data();
    T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
    T* gf = filter.requires_grad() ? filter.mutable_grad().data() : nullptr;
    T* gb = bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
    if (axis == Axis2D::kHeight) {
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t w = 0; w < W; ++w)
          for (std::int64_t c = 0; c < C; ++c) {
            const T g = gp[idx4(os, n, 0, w, c)];
            if (gb) gb[c] += g;
            for (std::int64_t h = 0; h < H; ++h) {
              if (gx) gx[idx4(xs, n, h, w, c)] += g * fp[idx2(fs, h, c)];
              if (gf) gf[idx2(fs, h, c)] += g * xp[idx4(xs, n, h, w, c)];
            }
          }
    } else {
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t c = 0; c < C; ++c) {
            const T g = gp[idx4(os, n, h, 0, c)];
            if (gb) gb[c] += g;
            for (std::int64_t w = 0; w < W; ++w) {
              if (gx) gx[idx4(xs, n, h, w, c)] += g * fp[idx2(fs, w, c)];
              if (gf) gf[idx2(fs, w, c)] += g * xp[idx4(xs, n, h, w, c)];
            }
          }
    }
  };

  return Tensor<T>::op_output(os, std::move(out), {x, filter, bias}, backward);
}

// --- softmax over an arbitrary axis set ---

namespace detail {

// Flat-index -> group-index map, where groups range over the non-axis dims.
inline std::shared_ptr<std::vector<std::int64_t>> softmax_groups(
    const Shape& s, const std::vector<int>& axes, std::int64_t* group_count) {
  std::vector<bool> is_axis(s.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(s.size())) {
      throw ShapeError("softmax: axis " + std::to_string(a) +
                       " out of range for shape " + shape_str(s));
    }
    is_axis[static_cast<std::size_t>(a)] = true;
  }
  std::int64_t groups = 1;
  std::vector<std::int64_t> gstride(s.size(), 0);
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    auto du = static_cast<std::size_t>(d);
    if (!is_axis[du]) {
      gstride[du] = groups;
      groups *= s[du];
    }
  }
  *group_count = groups;

  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(shape_numel(s)));
  std::vector<std::int64_t> digit(s.size(), 0);
  std::int64_t gid = 0;
  const std::int64_t n = shape_numel(s);
  for (std::int64_t i = 0; i < n; ++i) {
    (*map)[static_cast<std::size_t>(i)] = gid;
    for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++digit[du];
      gid += gstride[du];
      if (digit[du] < s[du]) break;
      gid -= gstride[du] * s[du];
      digit[du] = 0;
    }
  }
  return map;
}

}  // namespace detail

// Softmax normalized over the named axes; outputs in every group are positive
// and sum to 1. Max subtraction keeps exp() in range.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const std::vector<int>& axes) {
  if (axes.empty()) throw ShapeError("softmax: axis set must be non-empty");
  std::int64_t groups = 0;
  auto gmap = detail::softmax_groups(x.shape(), axes, &groups);
  auto xv = x.values();
  std::vector<T> maxv(static_cast<std::size_t>(groups),
                      -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto g = static_cast<std::size_t>((*gmap)[i]);
    maxv[g] = std::max(maxv[g], xv[i]);
  }
  std::vector<T> out(xv.size());
  std::vector<double> sums(static_cast<std::size_t>(groups), 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto g = static_cast<std::size_t>((*gmap)[i]);
    const T e = std::exp(xv[i] - maxv[g]);
    out[i] = e;
    sums[g] += static_cast<double>(e);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(out[i] / sums[static_cast<std::size_t>((*gmap)[i])]);
  }

  auto backward = [x, gmap, groups](TensorNode<T>& self) {
    if (!x.requires_grad()) return;
    auto& gx = x.mutable_grad();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    std::vector<double> dots(static_cast<std::size_t>(groups), 0.0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      dots[static_cast<std::size_t>((*gmap)[i])] +=
          static_cast<double>(g[i]) * static_cast<double>(y[i]);
    }
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += y[i] * (g[i] - static_cast<T>(dots[static_cast<std::size_t>((*gmap)[i])]));
    }
  };

  return Tensor<T>::op_output(x.shape(), std::move(out), {x}, backward);
}

// --- activations / regularization ---

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return Tensor<T>::op_output(
      x.shape(), std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto xv = x.values();
        auto& gx = x.mutable_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (xv[i] > T(0)) gx[i] += self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-xv[i]));
  return Tensor<T>::op_output(
      x.shape(), std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.mutable_grad();
        const T* y = self.value.data();
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += self.grad[i] * y[i] * (T(1) - y[i]);
      });
}

// Inverted dropout: zero with probability `rate`, scale survivors by
// 1/(1-rate) in train mode; identity in eval mode. The mask is a pure
// function of (seed, element index), so runs replay exactly.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train_mode,
                  std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ShapeError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!train_mode || rate == 0.0) return x;
  auto xv = x.values();
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = rng::uniform_at(seed, i) >= rate ? scale : T(0);
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  return Tensor<T>::op_output(
      x.shape(), std::move(out), {x}, [x, mask](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.mutable_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
      });
}

// --- pooling / upsampling ---

// 2x2 stride-2 max pooling. The gradient routes to the first maximum in scan
// order; even spatial extents are a precondition (pad inputs at the model
// level before pooling).
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  require_rank(x, 4, "maxpool2", "input");
  const Shape& xs = x.shape();
  const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(xs) +
                     "; pad inputs at the model level");
  }
  Shape os{N, H / 2, W / 2, C};
  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const T* xp = x.values().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oh = 0; oh < H / 2; ++oh)
      for (std::int64_t ow = 0; ow < W / 2; ++ow)
        for (std::int64_t c = 0; c < C; ++c) {
          std::int64_t best = idx4(xs, n, 2 * oh, 2 * ow, c);
          T bv = xp[best];
          for (int dh = 0; dh < 2; ++dh)
            for (int dw = 0; dw < 2; ++dw) {
              const std::int64_t i = idx4(xs, n, 2 * oh + dh, 2 * ow + dw, c);
              if (xp[i] > bv) {
                bv = xp[i];
                best = i;
              }
            }
          const std::int64_t o = idx4(os, n, oh, ow, c);
          out[static_cast<std::size_t>(o)] = bv;
          (*argmax)[static_cast<std::size_t>(o)] = best;
        }
  return Tensor<T>::op_output(
      os, std::move(out), {x}, [x, argmax](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.mutable_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          gx[static_cast<std::size_t>((*argmax)[i])] += self.grad[i];
        }
      });
}

// Nearest-neighbor 2x upsampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  require_rank(x, 4, "upsample2", "input");
  const Shape& xs = x.shape();
  const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  Shape os{N, H * 2, W * 2, C};
  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  const T* xp = x.values().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oh = 0; oh < 2 * H; ++oh)
      for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
        const T* src = xp + idx4(xs, n, oh / 2, ow / 2, 0);
        std::copy(src, src + C, out.begin() + idx4(os, n, oh, ow, 0));
      }
  return Tensor<T>::op_output(
      os, std::move(out), {x}, [x, os](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        const Shape& xs = x.shape();
        auto& gx = x.mutable_grad();
        const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t oh = 0; oh < 2 * H; ++oh)
            for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
              const T* grow = self.grad.data() + idx4(os, n, oh, ow, 0);
              T* gxrow = gx.data() + idx4(xs, n, oh / 2, ow / 2, 0);
              for (std::int64_t c = 0; c < C; ++c) gxrow[c] += grow[c];
            }
      });
}

// --- shape plumbing ---

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: need at least one tensor");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  }
  Shape os = parts[0].shape();
  for (std::size_t t = 1; t < parts.size(); ++t) {
    const Shape& s = parts[t].shape();
    if (static_cast<int>(s.size()) != rank) {
      throw ShapeError("concat: rank mismatch at operand " + std::to_string(t));
    }
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (s[static_cast<std::size_t>(d)] != os[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: axis " + std::to_string(d) +
                         " extents differ at operand " + std::to_string(t) + ": " +
                         shape_str(os) + " vs " + shape_str(s));
      }
    }
    os[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= os[static_cast<std::size_t>(d)];
  const std::int64_t out_block = os[static_cast<std::size_t>(axis)] * inner;

  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  std::int64_t offset = 0;
  for (const Tensor<T>& t : parts) {
    const std::int64_t block = t.dim(axis) * inner;
    const T* src = t.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block,
                out.begin() + o * out_block + offset);
    }
    offset += block;
  }

  auto backward = [parts, axis, outer, inner, out_block](TensorNode<T>& self) {
    std::int64_t offset = 0;
    for (const Tensor<T>& t : parts) {
      const std::int64_t block = t.dim(axis) * inner;
      if (t.requires_grad()) {
        auto& gt = t.mutable_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * out_block + offset;
          T* dst = gt.data() + o * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += g[i];
        }
      }
      offset += block;
    }
  };

  return Tensor<T>::op_output(os, std::move(out), parts, backward);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::op_output(
      std::move(new_shape), std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.mutable_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      });
}

// Fully connected: x[N,K] * w[K,M] + b[M]. Only the scSE baseline uses this.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "dense", "input");
  require_rank(w, 2, "dense", "weights");
  require_rank(b, 1, "dense", "bias");
  const std::int64_t N = x.dim(0), K = x.dim(1), M = w.dim(1);
  if (w.dim(0) != K) {
    throw ShapeError("dense: input K axis extent " + std::to_string(K) +
                     " != weight rows " + std::to_string(w.dim(0)));
  }
  if (b.dim(0) != M) throw ShapeError("dense: bias extent != weight cols");
  std::vector<T> out(static_cast<std::size_t>(N * M));
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  const T* bp = b.values().data();
  for (std::int64_t n = 0; n < N; ++n) {
    T* orow = out.data() + n * M;
    for (std::int64_t m = 0; m < M; ++m) orow[m] = bp[m];
    for (std::int64_t k = 0; k < K; ++k) {
      const T xv = xp[n * K + k];
      const T* wrow = wp + k * M;
      for (std::int64_t m = 0; m < M; ++m) orow[m] += xv * wrow[m];
    }
  }
  return Tensor<T>::op_output(
      Shape{N, M}, std::move(out), {x, w, b}, [x, w, b](TensorNode<T>& self) {
        const std::int64_t N = x.dim(0), K = x.dim(1), M = w.dim(1);
        const T* g = self.grad.data();
        const T* xp = x.values().data();
        const T* wp = w.values().data();
        if (x.requires_grad()) {
          auto& gx = x.mutable_grad();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) {
              T s = T(0);
              const T* wrow = wp + k * M;
              const T* grow = g + n * M;
              for (std::int64_t m = 0; m < M; ++m) s += grow[m] * wrow[m];
              gx[static_cast<std::size_t>(n * K + k)] += s;
            }
        }
        if (w.requires_grad()) {
          auto& gw = w.mutable_grad();
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) {
              const T xv = xp[n * K + k];
              T* gwrow = gw.data() + k * M;
              const T* grow = g + n * M;
              for (std::int64_t m = 0; m < M; ++m) gwrow[m] += xv * grow[m];
            }
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (std::int64_t n = 0; n < N; ++n) {
            const T* grow = g + n * M;
            for (std::int64_t m = 0; m < M; ++m) gb[m] += grow[m];
          }
        }
      });
}

// --- reductions (double accumulators keep f32 training sums honest) ---

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const Shape& xs = x.shape();
  const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  std::vector<T> out(static_cast<std::size_t>(N * C));
  const T* xp = x.values().data();
  const double inv = 1.0 / static_cast<double>(H * W);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) s += xp[idx4(xs, n, h, w, c)];
      out[static_cast<std::size_t>(n * C + c)] = static_cast<T>(s * inv);
    }
  return Tensor<T>::op_output(
      Shape{N, 1, 1, C}, std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        const Shape& xs = x.shape();
        const std::int64_t N = xs[0], H = xs[1], W = xs[2], C = xs[3];
        auto& gx = x.mutable_grad();
        const T inv = static_cast<T>(1.0 / static_cast<double>(H * W));
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
              for (std::int64_t c = 0; c < C; ++c)
                gx[static_cast<std::size_t>(idx4(xs, n, h, w, c))] +=
                    self.grad[static_cast<std::size_t>(n * C + c)] * inv;
      });
}

// [N,H,W,C] -> [N,H,W,1], summing channels.
template <typename T>
Tensor<T> sum_channels(const Tensor<T>& x) {
  require_rank(x, 4, "sum_channels", "input");
  const Shape& xs = x.shape();
  const std::int64_t NHW = xs[0] * xs[1] * xs[2], C = xs[3];
  std::vector<T> out(static_cast<std::size_t>(NHW));
  const T* xp = x.values().data();
  for (std::int64_t i = 0; i < NHW; ++i) {
    double s = 0.0;
    const T* row = xp + i * C;
    for (std::int64_t c = 0; c < C; ++c) s += row[c];
    out[static_cast<std::size_t>(i)] = static_cast<T>(s);
  }
  return Tensor<T>::op_output(
      Shape{xs[0], xs[1], xs[2], 1}, std::move(out), {x},
      [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        const Shape& xs = x.shape();
        const std::int64_t NHW = xs[0] * xs[1] * xs[2], C = xs[3];
        auto& gx = x.mutable_grad();
        for (std::int64_t i = 0; i < NHW; ++i) {
          const T g = self.grad[static_cast<std::size_t>(i)];
          T* row = gx.data() + i * C;
          for (std::int64_t c = 0; c < C; ++c) row[c] += g;
        }
      });
}

// [N,H,W,C] -> [C], summing every position.
template <typename T>
Tensor<T> channel_sums(const Tensor<T>& x) {
  require_rank(x, 4, "channel_sums", "input");
  const Shape& xs = x.shape();
  const std::int64_t NHW = xs[0] * xs[1] * xs[2], C = xs[3];
  std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
  const T* xp = x.values().data();
  for (std::int64_t i = 0; i < NHW; ++i) {
    const T* row = xp + i * C;
    for (std::int64_t c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += row[c];
  }
  std::vector<T> out(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c)
    out[static_cast<std::size_t>(c)] = static_cast<T>(acc[static_cast<std::size_t>(c)]);
  return Tensor<T>::op_output(
      Shape{C}, std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        const Shape& xs = x.shape();
        const std::int64_t NHW = xs[0] * xs[1] * xs[2], C = xs[3];
        auto& gx = x.mutable_grad();
        for (std::int64_t i = 0; i < NHW; ++i) {
          T* row = gx.data() + i * C;
          for (std::int64_t c = 0; c < C; ++c) row[c] += self.grad[static_cast<std::size_t>(c)];
        }
      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  return Tensor<T>::op_output(
      Shape{1}, {static_cast<T>(s)}, {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.mutable_grad();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
      });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return affine(sum_all(x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

}  // namespace mda
