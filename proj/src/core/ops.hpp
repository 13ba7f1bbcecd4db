#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gemm.hpp"
#include "params.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace mfen::ops {

template <typename S>
inline S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

namespace detail {

// Unpack one image [cin][h][w] into col[K x P] with K = cin*kh*kw rows in
// (ci, ky, kx) order and P = hout*wout columns. Out-of-bounds taps are zero.
template <typename S>
void im2col(const S* img, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int hout, int wout, S* col) {
  const int P = hout * wout;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    const S* plane = img + static_cast<std::size_t>(ci) * h * w;
    S* crow = col + static_cast<std::size_t>(ci) * kh * kw * P;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx, crow += P) {
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* dst = crow + static_cast<std::size_t>(oy) * wout;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wout; ++ox) dst[ox] = S(0);
            continue;
          }
          const S* src = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
          }
        }
      }
  }
}

// Scatter-add of a col matrix back into one image. Parallel over input
// channels: all rows of a given ci write only that channel's plane.
template <typename S>
void col2im_add(const S* col, int cin, int h, int w, int kh, int kw, int stride,
                int pad, int hout, int wout, S* img) {
  const int P = hout * wout;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    S* plane = img + static_cast<std::size_t>(ci) * h * w;
    const S* crow = col + static_cast<std::size_t>(ci) * kh * kw * P;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx, crow += P) {
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const S* src = crow + static_cast<std::size_t>(oy) * wout;
          S* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: zero padding, square-free generic kernel, exact analytic backward.
// Weight layout [cout, cin, kh, kw]; bias [1, cout, 1, 1].
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> conv2d(Tape<S>& tape, const NodeRef<S>& x, Param<S>& weight,
                  Param<S>& bias, int stride = 1, int padding = 0) {
  const Shape xs = x->value.shape;
  const int cout = weight.value.shape.n;
  const int cin = weight.value.shape.c;
  const int kh = weight.value.shape.h;
  const int kw = weight.value.shape.w;
  require(stride >= 1, "conv2d(" + weight.name + "): stride must be >= 1");
  require(padding >= 0, "conv2d(" + weight.name + "): padding must be >= 0");
  require(cin == xs.c, "conv2d(" + weight.name + "): weight expects " +
                           std::to_string(cin) + " input channels, input is " + xs.str());
  require(bias.value.numel() == static_cast<std::size_t>(cout),
          "conv2d(" + weight.name + "): bias size " + std::to_string(bias.value.numel()) +
              " != output channels " + std::to_string(cout));
  const int hout = (xs.h + 2 * padding - kh) / stride + 1;
  const int wout = (xs.w + 2 * padding - kw) / stride + 1;
  require(xs.h + 2 * padding >= kh && xs.w + 2 * padding >= kw && hout >= 1 && wout >= 1,
          "conv2d(" + weight.name + "): output would be empty for input " + xs.str());

  const int P = hout * wout;
  const int K = cin * kh * kw;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && padding == 0);

  auto out = tape.make_node(Tensor<S>(Shape{xs.n, cout, hout, wout}));
  std::vector<S> col;
  if (!pointwise) col.resize(static_cast<std::size_t>(K) * P);
  for (int n = 0; n < xs.n; ++n) {
    const S* img = x->value.plane(n, 0);
    const S* b = pointwise ? img : col.data();
    if (!pointwise)
      detail::im2col(img, cin, xs.h, xs.w, kh, kw, stride, padding, hout, wout, col.data());
    S* o = out->value.plane(n, 0);
    gemm_nn(o, weight.value.data.data(), b, cout, K, P);
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
      const S bv = bias.value.data[co];
      S* op = o + static_cast<std::size_t>(co) * P;
#pragma omp simd
      for (int p = 0; p < P; ++p) op[p] += bv;
    }
  }
  debug_check_finite(out->value, "conv2d");

  tape.push([x, out, &weight, &bias, stride, padding, pointwise]() {
    if (!out->has_grad()) return;
    const Shape xs2 = x->value.shape;
    const int cout2 = weight.value.shape.n;
    const int cin2 = weight.value.shape.c;
    const int kh2 = weight.value.shape.h;
    const int kw2 = weight.value.shape.w;
    const int hout2 = out->value.shape.h;
    const int wout2 = out->value.shape.w;
    const int P2 = hout2 * wout2;
    const int K2 = cin2 * kh2 * kw2;
    const bool want_dx = x->needs_grad;
    if (want_dx) x->ensure_grad();
    std::vector<S> col2, gcol;
    if (!pointwise) {
      col2.resize(static_cast<std::size_t>(K2) * P2);
      if (want_dx) gcol.resize(static_cast<std::size_t>(K2) * P2);
    }
    for (int n = 0; n < xs2.n; ++n) {
      const S* g = out->grad.plane(n, 0);
      // bias grads: one fixed-order sum per output channel
#pragma omp parallel for schedule(static)
      for (int co = 0; co < cout2; ++co) {
        const S* gp = g + static_cast<std::size_t>(co) * P2;
        S acc = 0;
#pragma omp simd reduction(+ : acc)
        for (int p = 0; p < P2; ++p) acc += gp[p];
        bias.grad.data[co] += acc;
      }
      const S* img = x->value.plane(n, 0);
      const S* b = pointwise ? img : col2.data();
      if (!pointwise)
        detail::im2col(img, cin2, xs2.h, xs2.w, kh2, kw2, stride, padding, hout2, wout2,
                       col2.data());
      gemm_nt(weight.grad.data.data(), g, b, cout2, P2, K2);
      if (want_dx) {
        if (pointwise) {
          gemm_tn(x->grad.plane(n, 0), weight.value.data.data(), g, K2, cout2, P2);
        } else {
          std::fill(gcol.begin(), gcol.end(), S(0));
          gemm_tn(gcol.data(), weight.value.data.data(), g, K2, cout2, P2);
          detail::col2im_add(gcol.data(), cin2, xs2.h, xs2.w, kh2, kw2, stride, padding, hout2,
                             wout2, x->grad.plane(n, 0));
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// upconv2x2: stride-2 2x2 up-convolution (each input pixel emits a 2x2 block).
// Weight layout [cin, cout, 2, 2]; used by the U-Net baseline decoder.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> upconv2x2(Tape<S>& tape, const NodeRef<S>& x, Param<S>& weight, Param<S>& bias) {
  const Shape xs = x->value.shape;
  const int cin = weight.value.shape.n;
  const int cout = weight.value.shape.c;
  require(weight.value.shape.h == 2 && weight.value.shape.w == 2,
          "upconv2x2(" + weight.name + "): weight must be [cin, cout, 2, 2]");
  require(cin == xs.c, "upconv2x2(" + weight.name + "): weight expects " +
                           std::to_string(cin) + " input channels, input is " + xs.str());
  const int P = xs.h * xs.w;
  auto out = tape.make_node(Tensor<S>(Shape{xs.n, cout, xs.h * 2, xs.w * 2}));

  std::vector<S> woff(static_cast<std::size_t>(cin) * cout);
  std::vector<S> sub(static_cast<std::size_t>(cout) * P);
  for (int n = 0; n < xs.n; ++n) {
    const S* img = x->value.plane(n, 0);
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < cout; ++co)
            woff[static_cast<std::size_t>(ci) * cout + co] =
                weight.value.at(ci, co, dy, dx);
        std::fill(sub.begin(), sub.end(), S(0));
        gemm_tn(sub.data(), woff.data(), img, cout, cin, P);
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout; ++co) {
          const S bv = bias.value.data[co];
          const S* sp = sub.data() + static_cast<std::size_t>(co) * P;
          S* op = out->value.plane(n, co);
          for (int y = 0; y < xs.h; ++y) {
            S* orow = op + static_cast<std::size_t>(2 * y + dy) * xs.w * 2 + dx;
            const S* srow = sp + static_cast<std::size_t>(y) * xs.w;
            for (int xx = 0; xx < xs.w; ++xx) orow[2 * xx] = srow[xx] + bv;
          }
        }
      }
  }
  debug_check_finite(out->value, "upconv2x2");

  tape.push([x, out, &weight, &bias]() {
    if (!out->has_grad()) return;
    const Shape xs2 = x->value.shape;
    const int cin2 = weight.value.shape.n;
    const int cout2 = weight.value.shape.c;
    const int P2 = xs2.h * xs2.w;
    const bool want_dx = x->needs_grad;
    if (want_dx) x->ensure_grad();
    std::vector<S> gsub(static_cast<std::size_t>(cout2) * P2);
    std::vector<S> woff(static_cast<std::size_t>(cin2) * cout2);
    std::vector<S> gwoff(static_cast<std::size_t>(cin2) * cout2);
    for (int n = 0; n < xs2.n; ++n) {
      const S* img = x->value.plane(n, 0);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          // gather the (dy,dx) sub-lattice of the output gradient
#pragma omp parallel for schedule(static)
          for (int co = 0; co < cout2; ++co) {
            const S* gp = out->grad.plane(n, co);
            S* dst = gsub.data() + static_cast<std::size_t>(co) * P2;
            S acc = 0;
            for (int y = 0; y < xs2.h; ++y) {
              const S* grow = gp + static_cast<std::size_t>(2 * y + dy) * xs2.w * 2 + dx;
              S* drow = dst + static_cast<std::size_t>(y) * xs2.w;
              for (int xx = 0; xx < xs2.w; ++xx) {
                drow[xx] = grow[2 * xx];
                acc += grow[2 * xx];
              }
            }
            bias.grad.data[co] += acc;
          }
          std::fill(gwoff.begin(), gwoff.end(), S(0));
          gemm_nt(gwoff.data(), img, gsub.data(), cin2, P2, cout2);
          for (int ci = 0; ci < cin2; ++ci)
            for (int co = 0; co < cout2; ++co)
              weight.grad.at(ci, co, dy, dx) += gwoff[static_cast<std::size_t>(ci) * cout2 + co];
          if (want_dx) {
            for (int ci = 0; ci < cin2; ++ci)
              for (int co = 0; co < cout2; ++co)
                woff[static_cast<std::size_t>(ci) * cout2 + co] = weight.value.at(ci, co, dy, dx);
            gemm_nn(x->grad.plane(n, 0), woff.data(), gsub.data(), cin2, cout2, P2);
          }
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d: non-overlapping windows; gradient routed to the argmax (first
// occurrence in row-major window order on ties).
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> maxpool2d(Tape<S>& tape, const NodeRef<S>& x, int k = 2, int stride = 2) {
  const Shape xs = x->value.shape;
  require(k >= 1 && stride >= 1 && k == stride,
          "maxpool2d: requires window == stride (got k=" + std::to_string(k) +
              ", stride=" + std::to_string(stride) + ")");
  require(xs.h % stride == 0 && xs.w % stride == 0,
          "maxpool2d: spatial dims of " + xs.str() + " not divisible by stride " +
              std::to_string(stride) + "; resize inputs upstream");
  const int hout = xs.h / stride;
  const int wout = xs.w / stride;
  auto out = tape.make_node(Tensor<S>(Shape{xs.n, xs.c, hout, wout}));
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out->value.numel());

  const int planes = xs.n * xs.c;
#pragma omp parallel for schedule(static)
  for (int pl = 0; pl < planes; ++pl) {
    const S* src = x->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    S* dst = out->value.data.data() + static_cast<std::size_t>(pl) * hout * wout;
    std::int32_t* am = argmax->data() + static_cast<std::size_t>(pl) * hout * wout;
    for (int oy = 0; oy < hout; ++oy)
      for (int ox = 0; ox < wout; ++ox) {
        S best = src[static_cast<std::size_t>(oy * stride) * xs.w + ox * stride];
        int besti = oy * stride * xs.w + ox * stride;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int idx = (oy * stride + ky) * xs.w + ox * stride + kx;
            if (src[idx] > best) {
              best = src[idx];
              besti = idx;
            }
          }
        dst[oy * wout + ox] = best;
        am[oy * wout + ox] = besti;
      }
  }
  debug_check_finite(out->value, "maxpool2d");

  tape.push([x, out, argmax, hout, wout]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const Shape xs2 = x->value.shape;
    const int planes2 = xs2.n * xs2.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes2; ++pl) {
      const S* g = out->grad.data.data() + static_cast<std::size_t>(pl) * hout * wout;
      S* gx = x->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      const std::int32_t* am = argmax->data() + static_cast<std::size_t>(pl) * hout * wout;
      for (int i = 0; i < hout * wout; ++i) gx[am[i]] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// avgpool2d_samesize: stride-1 odd-kernel average pooling where the divisor
// counts only in-bounds taps, so constant tensors map to themselves exactly.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> avgpool2d_samesize(Tape<S>& tape, const NodeRef<S>& x, int k = 3) {
  require(k >= 1 && k % 2 == 1, "avgpool2d_samesize: kernel must be odd, got " + std::to_string(k));
  const Shape xs = x->value.shape;
  const int r = (k - 1) / 2;
  auto out = tape.make_node(Tensor<S>(xs));

  const int planes = xs.n * xs.c;
#pragma omp parallel for schedule(static)
  for (int pl = 0; pl < planes; ++pl) {
    const S* src = x->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    S* dst = out->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    for (int y = 0; y < xs.h; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(xs.h - 1, y + r);
      for (int xx = 0; xx < xs.w; ++xx) {
        const int x0 = std::max(0, xx - r), x1 = std::min(xs.w - 1, xx + r);
        S acc = 0;
        for (int iy = y0; iy <= y1; ++iy) {
          const S* row = src + static_cast<std::size_t>(iy) * xs.w;
          for (int ix = x0; ix <= x1; ++ix) acc += row[ix];
        }
        dst[y * xs.w + xx] = acc / static_cast<S>((y1 - y0 + 1) * (x1 - x0 + 1));
      }
    }
  }
  debug_check_finite(out->value, "avgpool2d_samesize");

  tape.push([x, out, r]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const Shape xs2 = x->value.shape;
    const int planes2 = xs2.n * xs2.c;
    // gather form: each input cell collects grad/window-count from every
    // window that covers it
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes2; ++pl) {
      const S* g = out->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      S* gx = x->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      for (int y = 0; y < xs2.h; ++y) {
        const int oy0 = std::max(0, y - r), oy1 = std::min(xs2.h - 1, y + r);
        for (int xx = 0; xx < xs2.w; ++xx) {
          const int ox0 = std::max(0, xx - r), ox1 = std::min(xs2.w - 1, xx + r);
          S acc = 0;
          for (int oy = oy0; oy <= oy1; ++oy) {
            const int wy0 = std::max(0, oy - r), wy1 = std::min(xs2.h - 1, oy + r);
            for (int ox = ox0; ox <= ox1; ++ox) {
              const int wx0 = std::max(0, ox - r), wx1 = std::min(xs2.w - 1, ox + r);
              acc += g[oy * xs2.w + ox] / static_cast<S>((wy1 - wy0 + 1) * (wx1 - wx0 + 1));
            }
          }
          gx[y * xs2.w + xx] += acc;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// adaptive_avgpool: average pooling to a bins x bins grid with floor/ceil
// region partition (regions may overlap when bins does not divide the size).
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> adaptive_avgpool(Tape<S>& tape, const NodeRef<S>& x, int bins) {
  const Shape xs = x->value.shape;
  require(bins >= 1 && bins <= xs.h && bins <= xs.w,
          "adaptive_avgpool: bins=" + std::to_string(bins) + " exceeds spatial size of " + xs.str());
  auto out = tape.make_node(Tensor<S>(Shape{xs.n, xs.c, bins, bins}));

  auto lo = [](int i, int size, int b) { return (i * size) / b; };
  auto hi = [](int i, int size, int b) { return ((i + 1) * size + b - 1) / b; };

  const int planes = xs.n * xs.c;
#pragma omp parallel for schedule(static)
  for (int pl = 0; pl < planes; ++pl) {
    const S* src = x->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    S* dst = out->value.data.data() + static_cast<std::size_t>(pl) * bins * bins;
    for (int by = 0; by < bins; ++by) {
      const int y0 = lo(by, xs.h, bins), y1 = hi(by, xs.h, bins);
      for (int bx = 0; bx < bins; ++bx) {
        const int x0 = lo(bx, xs.w, bins), x1 = hi(bx, xs.w, bins);
        S acc = 0;
        for (int iy = y0; iy < y1; ++iy) {
          const S* row = src + static_cast<std::size_t>(iy) * xs.w;
          for (int ix = x0; ix < x1; ++ix) acc += row[ix];
        }
        dst[by * bins + bx] = acc / static_cast<S>((y1 - y0) * (x1 - x0));
      }
    }
  }
  debug_check_finite(out->value, "adaptive_avgpool");

  tape.push([x, out, bins, lo, hi]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const Shape xs2 = x->value.shape;
    const int planes2 = xs2.n * xs2.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes2; ++pl) {
      const S* g = out->grad.data.data() + static_cast<std::size_t>(pl) * bins * bins;
      S* gx = x->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      for (int by = 0; by < bins; ++by) {
        const int y0 = lo(by, xs2.h, bins), y1 = hi(by, xs2.h, bins);
        for (int bx = 0; bx < bins; ++bx) {
          const int x0 = lo(bx, xs2.w, bins), x1 = hi(bx, xs2.w, bins);
          const S gv = g[by * bins + bx] / static_cast<S>((y1 - y0) * (x1 - x0));
          for (int iy = y0; iy < y1; ++iy) {
            S* row = gx + static_cast<std::size_t>(iy) * xs2.w;
            for (int ix = x0; ix < x1; ++ix) row[ix] += gv;
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// channel_layernorm: normalizes over the channel axis at every (n,h,w)
// position, then applies the per-channel affine gamma/beta.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> channel_layernorm(Tape<S>& tape, const NodeRef<S>& x, Param<S>& gamma,
                             Param<S>& beta, double eps = 1e-5) {
  const Shape xs = x->value.shape;
  require(gamma.value.numel() == static_cast<std::size_t>(xs.c) &&
              beta.value.numel() == static_cast<std::size_t>(xs.c),
          "channel_layernorm(" + gamma.name + "): gamma/beta length must equal channels (" +
              std::to_string(xs.c) + "), input " + xs.str());
  const int C = xs.c;
  const int P = xs.h * xs.w;
  auto out = tape.make_node(Tensor<S>(xs));
  // saved statistics per (n, position)
  auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(xs.n) * P);
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(xs.n) * P);

  for (int n = 0; n < xs.n; ++n) {
    const S* src = x->value.plane(n, 0);
    S* mu = mean->data() + static_cast<std::size_t>(n) * P;
    S* is = inv_std->data() + static_cast<std::size_t>(n) * P;
    S* dst = out->value.plane(n, 0);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < P; ++p) {
      S acc = 0;
      for (int c = 0; c < C; ++c) acc += src[static_cast<std::size_t>(c) * P + p];
      const S m = acc / static_cast<S>(C);
      S var = 0;
      for (int c = 0; c < C; ++c) {
        const S d = src[static_cast<std::size_t>(c) * P + p] - m;
        var += d * d;
      }
      var /= static_cast<S>(C);
      mu[p] = m;
      is[p] = S(1) / std::sqrt(var + static_cast<S>(eps));
    }
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
      const S gam = gamma.value.data[c];
      const S bet = beta.value.data[c];
      const S* sp = src + static_cast<std::size_t>(c) * P;
      S* dp = dst + static_cast<std::size_t>(c) * P;
#pragma omp simd
      for (int p = 0; p < P; ++p) dp[p] = gam * (sp[p] - mu[p]) * is[p] + bet;
    }
  }
  debug_check_finite(out->value, "channel_layernorm");

  tape.push([x, out, &gamma, &beta, mean, inv_std]() {
    if (!out->has_grad()) return;
    const Shape xs2 = x->value.shape;
    const int C2 = xs2.c;
    const int P2 = xs2.h * xs2.w;
    const bool want_dx = x->needs_grad;
    if (want_dx) x->ensure_grad();
    std::vector<S> s1(P2), s2(P2);
    for (int n = 0; n < xs2.n; ++n) {
      const S* src = x->value.plane(n, 0);
      const S* g = out->grad.plane(n, 0);
      const S* mu = mean->data() + static_cast<std::size_t>(n) * P2;
      const S* is = inv_std->data() + static_cast<std::size_t>(n) * P2;
      // per-channel sums over positions, one thread per channel
#pragma omp parallel for schedule(static)
      for (int c = 0; c < C2; ++c) {
        const S* sp = src + static_cast<std::size_t>(c) * P2;
        const S* gp = g + static_cast<std::size_t>(c) * P2;
        S dg = 0, db = 0;
#pragma omp simd reduction(+ : dg, db)
        for (int p = 0; p < P2; ++p) {
          dg += gp[p] * (sp[p] - mu[p]) * is[p];
          db += gp[p];
        }
        gamma.grad.data[c] += dg;
        beta.grad.data[c] += db;
      }
      if (!want_dx) continue;
      // dx = inv_std * (gy*gamma - mean_c(gy*gamma) - xhat * mean_c(gy*gamma*xhat))
      std::fill(s1.begin(), s1.end(), S(0));
      std::fill(s2.begin(), s2.end(), S(0));
      for (int c = 0; c < C2; ++c) {
        const S gam = gamma.value.data[c];
        const S* sp = src + static_cast<std::size_t>(c) * P2;
        const S* gp = g + static_cast<std::size_t>(c) * P2;
#pragma omp simd
        for (int p = 0; p < P2; ++p) {
          const S dyg = gp[p] * gam;
          s1[p] += dyg;
          s2[p] += dyg * (sp[p] - mu[p]) * is[p];
        }
      }
      S* gx = x->grad.plane(n, 0);
#pragma omp parallel for schedule(static)
      for (int c = 0; c < C2; ++c) {
        const S gam = gamma.value.data[c];
        const S* sp = src + static_cast<std::size_t>(c) * P2;
        const S* gp = g + static_cast<std::size_t>(c) * P2;
        S* gxp = gx + static_cast<std::size_t>(c) * P2;
#pragma omp simd
        for (int p = 0; p < P2; ++p) {
          const S xhat = (sp[p] - mu[p]) * is[p];
          gxp[p] += is[p] * (gp[p] * gam - (s1[p] + xhat * s2[p]) / static_cast<S>(C2));
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> swish(Tape<S>& tape, const NodeRef<S>& x) {
  auto out = tape.make_node(Tensor<S>(x->value.shape));
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(x->value.numel());
  const S* src = x->value.data.data();
  S* dst = out->value.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) dst[i] = src[i] * sigmoid(src[i]);
  debug_check_finite(out->value, "swish");

  tape.push([x, out]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const std::ptrdiff_t cnt = static_cast<std::ptrdiff_t>(x->value.numel());
    const S* xv = x->value.data.data();
    const S* g = out->grad.data.data();
    S* gx = x->grad.data.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < cnt; ++i) {
      const S sg = sigmoid(xv[i]);
      gx[i] += g[i] * sg * (S(1) + xv[i] * (S(1) - sg));
    }
  });
  return out;
}

template <typename S>
NodeRef<S> relu(Tape<S>& tape, const NodeRef<S>& x) {
  auto out = tape.make_node(Tensor<S>(x->value.shape));
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(x->value.numel());
  const S* src = x->value.data.data();
  S* dst = out->value.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) dst[i] = src[i] > S(0) ? src[i] : S(0);

  tape.push([x, out]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const std::ptrdiff_t cnt = static_cast<std::ptrdiff_t>(x->value.numel());
    const S* xv = x->value.data.data();
    const S* g = out->grad.data.data();
    S* gx = x->grad.data.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < cnt; ++i)
      if (xv[i] > S(0)) gx[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// upsample_nearest2x: 2x2 replication; backward sums the four replicas.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> upsample_nearest2x(Tape<S>& tape, const NodeRef<S>& x) {
  const Shape xs = x->value.shape;
  auto out = tape.make_node(Tensor<S>(Shape{xs.n, xs.c, xs.h * 2, xs.w * 2}));
  const int planes = xs.n * xs.c;
#pragma omp parallel for schedule(static)
  for (int pl = 0; pl < planes; ++pl) {
    const S* src = x->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    S* dst = out->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w * 4;
    for (int y = 0; y < xs.h; ++y) {
      const S* srow = src + static_cast<std::size_t>(y) * xs.w;
      S* d0 = dst + static_cast<std::size_t>(2 * y) * xs.w * 2;
      S* d1 = d0 + xs.w * 2;
      for (int xx = 0; xx < xs.w; ++xx) {
        d0[2 * xx] = d0[2 * xx + 1] = srow[xx];
        d1[2 * xx] = d1[2 * xx + 1] = srow[xx];
      }
    }
  }

  tape.push([x, out]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const Shape xs2 = x->value.shape;
    const int planes2 = xs2.n * xs2.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes2; ++pl) {
      const S* g = out->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w * 4;
      S* gx = x->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      for (int y = 0; y < xs2.h; ++y) {
        const S* g0 = g + static_cast<std::size_t>(2 * y) * xs2.w * 2;
        const S* g1 = g0 + xs2.w * 2;
        S* grow = gx + static_cast<std::size_t>(y) * xs2.w;
        for (int xx = 0; xx < xs2.w; ++xx)
          grow[xx] += g0[2 * xx] + g0[2 * xx + 1] + g1[2 * xx] + g1[2 * xx + 1];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// concat_channels: a's channels first; backward splits the gradient back.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> concat_channels(Tape<S>& tape, const NodeRef<S>& a, const NodeRef<S>& b) {
  const Shape as = a->value.shape;
  const Shape bs = b->value.shape;
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
          "concat_channels: inputs disagree outside the channel axis: " + as.str() + " vs " +
              bs.str());
  auto out = tape.make_node(Tensor<S>(Shape{as.n, as.c + bs.c, as.h, as.w}));
  const std::size_t pa = static_cast<std::size_t>(as.c) * as.h * as.w;
  const std::size_t pb = static_cast<std::size_t>(bs.c) * bs.h * bs.w;
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a->value.plane(n, 0), pa, out->value.plane(n, 0));
    std::copy_n(b->value.plane(n, 0), pb, out->value.plane(n, 0) + pa);
  }

  tape.push([a, b, out, pa, pb]() {
    if (!out->has_grad()) return;
    const int n_count = out->value.shape.n;
    if (a->needs_grad) {
      a->ensure_grad();
      for (int n = 0; n < n_count; ++n) {
        const S* g = out->grad.plane(n, 0);
        S* ga = a->grad.plane(n, 0);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pa); ++i) ga[i] += g[i];
      }
    }
    if (b->needs_grad) {
      b->ensure_grad();
      for (int n = 0; n < n_count; ++n) {
        const S* g = out->grad.plane(n, 0) + pa;
        S* gb = b->grad.plane(n, 0);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pb); ++i) gb[i] += g[i];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// add: elementwise residual sum.
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> add(Tape<S>& tape, const NodeRef<S>& a, const NodeRef<S>& b) {
  require(a->value.shape == b->value.shape,
          "add: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  auto out = tape.make_node(Tensor<S>(a->value.shape));
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(out->value.numel());
  const S* av = a->value.data.data();
  const S* bv = b->value.data.data();
  S* dst = out->value.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) dst[i] = av[i] + bv[i];

  tape.push([a, b, out]() {
    if (!out->has_grad()) return;
    const std::ptrdiff_t cnt = static_cast<std::ptrdiff_t>(out->value.numel());
    const S* g = out->grad.data.data();
    for (const NodeRef<S>& t : {a, b}) {
      if (!t->needs_grad) continue;
      t->ensure_grad();
      S* gt = t->grad.data.data();
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < cnt; ++i) gt[i] += g[i];
    }
  });
  return out;
}

// out = a - b
template <typename S>
NodeRef<S> sub(Tape<S>& tape, const NodeRef<S>& a, const NodeRef<S>& b) {
  require(a->value.shape == b->value.shape,
          "sub: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  auto out = tape.make_node(Tensor<S>(a->value.shape));
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(out->value.numel());
  const S* av = a->value.data.data();
  const S* bv = b->value.data.data();
  S* dst = out->value.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) dst[i] = av[i] - bv[i];

  tape.push([a, b, out]() {
    if (!out->has_grad()) return;
    const std::ptrdiff_t cnt = static_cast<std::ptrdiff_t>(out->value.numel());
    const S* g = out->grad.data.data();
    if (a->needs_grad) {
      a->ensure_grad();
      S* ga = a->grad.data.data();
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < cnt; ++i) ga[i] += g[i];
    }
    if (b->needs_grad) {
      b->ensure_grad();
      S* gb = b->grad.data.data();
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < cnt; ++i) gb[i] -= g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// resize_nearest: nearest-neighbor resize to an arbitrary target size
// (source index = floor(out_index * in_size / out_size)).
// ---------------------------------------------------------------------------
template <typename S>
NodeRef<S> resize_nearest(Tape<S>& tape, const NodeRef<S>& x, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_nearest: target size must be >= 1");
  const Shape xs = x->value.shape;
  auto out = tape.make_node(Tensor<S>(Shape{xs.n, xs.c, out_h, out_w}));
  const int planes = xs.n * xs.c;
#pragma omp parallel for schedule(static)
  for (int pl = 0; pl < planes; ++pl) {
    const S* src = x->value.data.data() + static_cast<std::size_t>(pl) * xs.h * xs.w;
    S* dst = out->value.data.data() + static_cast<std::size_t>(pl) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const int iy = static_cast<int>(static_cast<std::int64_t>(oy) * xs.h / out_h);
      const S* srow = src + static_cast<std::size_t>(iy) * xs.w;
      S* drow = dst + static_cast<std::size_t>(oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox)
        drow[ox] = srow[static_cast<std::int64_t>(ox) * xs.w / out_w];
    }
  }

  tape.push([x, out, out_h, out_w]() {
    if (!out->has_grad() || !x->needs_grad) return;
    x->ensure_grad();
    const Shape xs2 = x->value.shape;
    const int planes2 = xs2.n * xs2.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes2; ++pl) {
      const S* g = out->grad.data.data() + static_cast<std::size_t>(pl) * out_h * out_w;
      S* gx = x->grad.data.data() + static_cast<std::size_t>(pl) * xs2.h * xs2.w;
      for (int oy = 0; oy < out_h; ++oy) {
        const int iy = static_cast<int>(static_cast<std::int64_t>(oy) * xs2.h / out_h);
        const S* grow = g + static_cast<std::size_t>(oy) * out_w;
        S* gxrow = gx + static_cast<std::size_t>(iy) * xs2.w;
        for (int ox = 0; ox < out_w; ++ox)
          gxrow[static_cast<std::int64_t>(ox) * xs2.w / out_w] += grow[ox];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// bce_with_logits: mean of the numerically stable form
//   max(x,0) - x*t + log(1 + exp(-|x|))
// Returns the scalar loss; backward seeds logits.grad with
// loss_seed * (sigmoid(x) - t) / count.
// ---------------------------------------------------------------------------
template <typename S>
double bce_with_logits(Tape<S>& tape, const NodeRef<S>& logits, const Tensor<S>& target,
                       double loss_seed = 1.0) {
  require(logits->value.shape == target.shape,
          "bce_with_logits: shape mismatch " + logits->value.shape.str() + " vs " +
              target.shape.str());
  const std::size_t count = target.numel();
  for (std::size_t i = 0; i < count; ++i)
    require(target.data[i] >= S(0) && target.data[i] <= S(1),
            "bce_with_logits: target value outside [0,1]");
  double acc = 0.0;  // fixed-order accumulation in double
  const S* xv = logits->value.data.data();
  const S* tv = target.data.data();
  for (std::size_t i = 0; i < count; ++i) {
    const double x = static_cast<double>(xv[i]);
    const double t = static_cast<double>(tv[i]);
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  const double loss = acc / static_cast<double>(count);
  require(std::isfinite(loss), "bce_with_logits: non-finite loss");

  auto target_copy = std::make_shared<Tensor<S>>(target);
  tape.push([logits, target_copy, count, loss_seed]() {
    if (!logits->needs_grad) return;
    logits->ensure_grad();
    const S scale = static_cast<S>(loss_seed / static_cast<double>(count));
    const S* xv2 = logits->value.data.data();
    const S* tv2 = target_copy->data.data();
    S* g = logits->grad.data.data();
    const std::ptrdiff_t cnt = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < cnt; ++i)
      g[i] += scale * (sigmoid(xv2[i]) - tv2[i]);
  });
  return loss;
}

}  // namespace mfen::ops
