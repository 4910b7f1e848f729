#pragma once

// Forward and backward kernels on plain tensors. The autograd layer in
// autograd.hpp wires these into graph nodes; tests call them directly.
//
// All accumulations run in a fixed loop order so results are bit-reproducible.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "panokit/tensor.hpp"

namespace panokit {

enum class HorizontalPad { Wrap, Zero };
enum class VerticalPad { Zero };

struct PadSpec {
  HorizontalPad horizontal = HorizontalPad::Wrap;
  VerticalPad vertical = VerticalPad::Zero;
  std::size_t amount = 0;
};

inline const char* to_string(HorizontalPad p) { return p == HorizontalPad::Wrap ? "wrap" : "zero"; }

namespace detail {

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Padding

/// Pads [C,H,W] to [C,H+2*pv,W+2*ph]. Horizontal wrap copies the opposite border.
template <class T>
Tensor<T> pad_map(const Tensor<T>& x, std::size_t ph, std::size_t pv, HorizontalPad mode) {
  require_rank(x, 3, "pad_map");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (mode == HorizontalPad::Wrap && ph >= w && ph > 0)
    throw DimensionError("wrap padding of " + std::to_string(ph) + " needs width > padding, got width " +
                         std::to_string(w));
  const std::size_t hp = h + 2 * pv, wp = w + 2 * ph;
  Tensor<T> out({c, hp, wp});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) {
      const T* src = x.data() + (ch * h + i) * w;
      T* dst = out.data() + (ch * hp + i + pv) * wp;
      std::copy(src, src + w, dst + ph);
      if (mode == HorizontalPad::Wrap) {
        std::copy(src + (w - ph), src + w, dst);
        std::copy(src, src + ph, dst + ph + w);
      }
    }
  return out;
}

/// Adjoint of pad_map: folds a padded gradient back onto the unpadded map.
template <class T>
Tensor<T> unpad_map(const Tensor<T>& g, std::size_t h, std::size_t w, std::size_t ph, std::size_t pv,
                    HorizontalPad mode) {
  const std::size_t c = g.dim(0), hp = g.dim(1), wp = g.dim(2);
  Tensor<T> out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) {
      const T* src = g.data() + (ch * hp + i + pv) * wp;
      T* dst = out.data() + (ch * h + i) * w;
      for (std::size_t j = 0; j < w; ++j) dst[j] = src[ph + j];
      if (mode == HorizontalPad::Wrap) {
        for (std::size_t j = 0; j < ph; ++j) {
          dst[w - ph + j] += src[j];
          dst[j] += src[ph + w + j];
        }
      }
    }
  return out;
}

/// Left/right wrap concatenation: [last p columns | t | first p columns].
template <class T>
Tensor<T> wrap_pad(const Tensor<T>& t, std::size_t p) {
  require_rank(t, 3, "wrap_pad");
  if (p >= t.dim(2) && p > 0)
    throw DimensionError("wrap_pad: p=" + std::to_string(p) + " must be < width " + std::to_string(t.dim(2)));
  return pad_map(t, p, 0, HorizontalPad::Wrap);
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t cin, h, w, cout, k, stride, pad, hp, wp, ho, wo;
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, const PadSpec& pad,
                           std::size_t stride) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  ConvGeometry g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = pad.amount;
  if (kernel.dim(1) != g.cin || kernel.dim(3) != g.k)
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  if (g.k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (!bias.empty() && bias.shape() != Shape{g.cout}) throw DimensionError("conv2d: bias shape mismatch");
  if (stride == 0) throw DimensionError("conv2d: stride 0");
  g.hp = g.h + 2 * g.pad;
  g.wp = g.w + 2 * g.pad;
  if (g.hp < g.k || g.wp < g.k) throw DimensionError("conv2d: kernel larger than padded input");
  g.ho = (g.hp - g.k) / stride + 1;
  g.wo = (g.wp - g.k) / stride + 1;
  return g;
}

/// Valid convolution over an already padded [Cin,Hp,Wp] input.
template <class T>
void conv_valid_accumulate(const T* padded, const T* kernel, T* out, const ConvGeometry& g) {
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const T wv = kernel[((co * g.cin + ci) * g.k + ky) * g.k + kx];
          for (std::size_t y = 0; y < g.ho; ++y) {
            T* orow = out + (co * g.ho + y) * g.wo;
            const T* irow = padded + (ci * g.hp + y * g.stride + ky) * g.wp + kx;
            if (g.stride == 1) {
              for (std::size_t xo = 0; xo < g.wo; ++xo) orow[xo] += wv * irow[xo];
            } else {
              for (std::size_t xo = 0; xo < g.wo; ++xo) orow[xo] += wv * irow[xo * g.stride];
            }
          }
        }
}

/// 2-D cross-correlation with per-axis padding. Horizontal neighborhoods wrap
/// cyclically under HorizontalPad::Wrap; vertical taps outside the map read zero.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, const PadSpec& pad,
                 std::size_t stride = 1) {
  const ConvGeometry g = conv_geometry(x, kernel, bias, pad, stride);
  const Tensor<T> padded = pad_map(x, g.pad, g.pad, pad.horizontal);
  Tensor<T> out({g.cout, g.ho, g.wo});
  if (!bias.empty())
    for (std::size_t co = 0; co < g.cout; ++co)
      std::fill(out.data() + co * g.ho * g.wo, out.data() + (co + 1) * g.ho * g.wo, bias[co]);
  conv_valid_accumulate(padded.data(), kernel.data(), out.data(), g);
  return out;
}

template <class T>
struct ConvGrads {
  Tensor<T> input, kernel, bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, const PadSpec& pad,
                             std::size_t stride, const Tensor<T>& gout) {
  const ConvGeometry g = conv_geometry(x, kernel, bias, pad, stride);
  require_shape(gout, {g.cout, g.ho, g.wo}, "conv2d_backward");
  const Tensor<T> padded = pad_map(x, g.pad, g.pad, pad.horizontal);
  Tensor<T> gpad({g.cin, g.hp, g.wp});
  Tensor<T> gk(kernel.shape());
  Tensor<T> gb(Shape{g.cout});
  for (std::size_t co = 0; co < g.cout; ++co) {
    T s{0};
    const T* go = gout.data() + co * g.ho * g.wo;
    for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += go[i];
    gb[co] = s;
  }
  // Column-wise partial sums keep the inner loops free of reductions.
  std::vector<T> partial(g.wo);
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::size_t kidx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
          const T wv = kernel[kidx];
          std::fill(partial.begin(), partial.end(), T{0});
          for (std::size_t y = 0; y < g.ho; ++y) {
            const T* grow = gout.data() + (co * g.ho + y) * g.wo;
            const std::size_t ioff = (ci * g.hp + y * g.stride + ky) * g.wp + kx;
            const T* irow = padded.data() + ioff;
            T* gprow = gpad.data() + ioff;
            if (g.stride == 1) {
              for (std::size_t xo = 0; xo < g.wo; ++xo) partial[xo] += grow[xo] * irow[xo];
              for (std::size_t xo = 0; xo < g.wo; ++xo) gprow[xo] += wv * grow[xo];
            } else {
              for (std::size_t xo = 0; xo < g.wo; ++xo) partial[xo] += grow[xo] * irow[xo * g.stride];
              for (std::size_t xo = 0; xo < g.wo; ++xo) gprow[xo * g.stride] += wv * grow[xo];
            }
          }
          T acc{0};
          for (T v : partial) acc += v;
          gk[kidx] = acc;
        }
  return {unpad_map(gpad, g.h, g.w, g.pad, g.pad, pad.horizontal), std::move(gk), bias.empty() ? Tensor<T>{} : gb};
}

/// Stride-2, 2x2 transposed convolution: [Cin,h,w] -> [Cout,2h,2w]. Kernel is [Cin,Cout,2,2].
template <class T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  require_rank(x, 3, "conv_transpose2x2 input");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kernel.rank() != 4 || kernel.dim(0) != cin || kernel.dim(2) != 2 || kernel.dim(3) != 2)
    throw DimensionError("conv_transpose2x2: kernel " + shape_str(kernel.shape()));
  const std::size_t cout = kernel.dim(1);
  require_shape(bias, {cout}, "conv_transpose2x2 bias");
  Tensor<T> out({cout, 2 * h, 2 * w});
  for (std::size_t co = 0; co < cout; ++co)
    std::fill(out.data() + co * 4 * h * w, out.data() + (co + 1) * 4 * h * w, bias[co]);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ky = 0; ky < 2; ++ky)
        for (std::size_t kx = 0; kx < 2; ++kx) {
          const T wv = kernel[((ci * cout + co) * 2 + ky) * 2 + kx];
          for (std::size_t y = 0; y < h; ++y) {
            const T* irow = x.data() + (ci * h + y) * w;
            T* orow = out.data() + (co * 2 * h + 2 * y + ky) * 2 * w + kx;
            for (std::size_t xx = 0; xx < w; ++xx) orow[2 * xx] += wv * irow[xx];
          }
        }
  return out;
}

template <class T>
ConvGrads<T> conv_transpose2x2_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& gout) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = kernel.dim(1);
  Tensor<T> gx(x.shape()), gk(kernel.shape()), gb(Shape{cout});
  for (std::size_t co = 0; co < cout; ++co) {
    T s{0};
    for (std::size_t i = 0; i < 4 * h * w; ++i) s += gout[co * 4 * h * w + i];
    gb[co] = s;
  }
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ky = 0; ky < 2; ++ky)
        for (std::size_t kx = 0; kx < 2; ++kx) {
          const std::size_t kidx = ((ci * cout + co) * 2 + ky) * 2 + kx;
          const T wv = kernel[kidx];
          T acc{0};
          for (std::size_t y = 0; y < h; ++y) {
            const T* irow = x.data() + (ci * h + y) * w;
            T* girow = gx.data() + (ci * h + y) * w;
            const T* grow = gout.data() + (co * 2 * h + 2 * y + ky) * 2 * w + kx;
            for (std::size_t xx = 0; xx < w; ++xx) {
              acc += irow[xx] * grow[2 * xx];
              girow[xx] += wv * grow[2 * xx];
            }
          }
          gk[kidx] = acc;
        }
  return {std::move(gx), std::move(gk), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Bilinear upsampling by an integer factor (half-pixel centers).

struct InterpTap {
  std::size_t i0, i1;
  double a;  // weight of i1
};

inline std::vector<InterpTap> interp_taps(std::size_t n_in, std::size_t factor, bool wrap) {
  std::vector<InterpTap> taps(n_in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    const double fl = std::floor(src);
    const double a = src - fl;
    long i0 = static_cast<long>(fl), i1 = i0 + 1;
    const long n = static_cast<long>(n_in);
    if (wrap) {
      i0 = (i0 % n + n) % n;
      i1 = (i1 % n + n) % n;
    } else {
      i0 = std::clamp(i0, 0L, n - 1);
      i1 = std::clamp(i1, 0L, n - 1);
    }
    taps[o] = {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), a};
  }
  return taps;
}

/// [C,h,w] -> [C,f*h,f*w]. Rows clamp at the poles; columns wrap when `wrap_columns`.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor, bool wrap_columns) {
  require_rank(x, 3, "upsample_bilinear");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h * factor, wo = w * factor;
  const auto rt = interp_taps(h, factor, false);
  const auto ct = interp_taps(w, factor, wrap_columns);
  Tensor<T> out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y) {
      const T* r0 = x.data() + (ch * h + rt[y].i0) * w;
      const T* r1 = x.data() + (ch * h + rt[y].i1) * w;
      const T ay = static_cast<T>(rt[y].a);
      T* orow = out.data() + (ch * ho + y) * wo;
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const T ax = static_cast<T>(ct[xo].a);
        const T top = r0[ct[xo].i0] * (T{1} - ax) + r0[ct[xo].i1] * ax;
        const T bot = r1[ct[xo].i0] * (T{1} - ax) + r1[ct[xo].i1] * ax;
        orow[xo] = top * (T{1} - ay) + bot * ay;
      }
    }
  return out;
}

template <class T>
Tensor<T> upsample_bilinear_backward(const Shape& in_shape, std::size_t factor, bool wrap_columns,
                                     const Tensor<T>& gout) {
  const std::size_t c = in_shape[0], h = in_shape[1], w = in_shape[2], ho = h * factor, wo = w * factor;
  const auto rt = interp_taps(h, factor, false);
  const auto ct = interp_taps(w, factor, wrap_columns);
  Tensor<T> gx(in_shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y) {
      T* r0 = gx.data() + (ch * h + rt[y].i0) * w;
      T* r1 = gx.data() + (ch * h + rt[y].i1) * w;
      const T ay = static_cast<T>(rt[y].a);
      const T* grow = gout.data() + (ch * ho + y) * wo;
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const T ax = static_cast<T>(ct[xo].a);
        const T g = grow[xo];
        r0[ct[xo].i0] += g * (T{1} - ay) * (T{1} - ax);
        r0[ct[xo].i1] += g * (T{1} - ay) * ax;
        r1[ct[xo].i0] += g * ay * (T{1} - ax);
        r1[ct[xo].i1] += g * ay * ax;
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Matrix products

/// a [n,k] * b [k,m] -> [n,m]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    T* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a [n,k] * b[m,k]^T -> [n,m]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k) throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const T* ar = a.data() + i * k;
      const T* br = b.data() + j * k;
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * m + j] = s;
    }
  return out;
}

/// a[k,n]^T * b [k,m] -> [n,m]
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_tn lhs");
  require_rank(b, 2, "matmul_tn rhs");
  const std::size_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  Tensor<T> out({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * n;
    const T* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = arow[i];
      T* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// Affine map of rows: x [n,din], weight [dout,din], bias [dout] -> [n,dout].
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight, 2, "dense weight");
  require_rank(x, 2, "dense input");
  if (x.dim(1) != weight.dim(1))
    throw DimensionError("dense: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  require_shape(bias, {weight.dim(0)}, "dense bias");
  Tensor<T> out = matmul_nt(x, weight);
  const std::size_t n = out.dim(0), m = out.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];
  return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require_rank(a, 2, "transpose2d");
  const std::size_t n = a.dim(0), m = a.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a[i * m + j];
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

/// Max-subtracted softmax along `axis`. NaN input raises NumericError.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < sp.n; ++i) {
        const T v = x[base + i * sp.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T s{0};
      for (std::size_t i = 0; i < sp.n; ++i) {
        const T e = std::exp(x[base + i * sp.inner] - mx);
        out[base + i * sp.inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= s;
    }
  return out;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& y, std::size_t axis, const Tensor<T>& gy) {
  const auto sp = detail::split_axis(y.shape(), axis);
  Tensor<T> gx(y.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T dot{0};
      for (std::size_t i = 0; i < sp.n; ++i) dot += gy[base + i * sp.inner] * y[base + i * sp.inner];
      for (std::size_t i = 0; i < sp.n; ++i) {
        const std::size_t idx = base + i * sp.inner;
        gx[idx] = y[idx] * (gy[idx] - dot);
      }
    }
  return gx;
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace panokit
