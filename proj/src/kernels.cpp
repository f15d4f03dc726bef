#include "rvos/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <vector>

#include "rvos/math.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace rvos::kernels {

void flush_denormals() {
#if defined(__SSE__)
#pragma omp parallel
  _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
  _mm_setcsr(_mm_getcsr() | 0x8040);
#endif
}

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Parallelize only loops large enough to amortize a team spawn.
constexpr std::ptrdiff_t kParallelGrain = 1 << 14;

template <typename S>
void im2col(const ConvGeom& g, const S* x, S* cols) {
  const int ho = g.hout(), wo = g.wout();
  const int rows = g.cin * g.k * g.k;
  const std::ptrdiff_t work = static_cast<std::ptrdiff_t>(rows) * ho * wo;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (int r = 0; r < rows; ++r) {
    const int c = r / (g.k * g.k);
    const int ky = (r / g.k) % g.k;
    const int kx = r % g.k;
    S* dst = cols + static_cast<std::size_t>(r) * ho * wo;
    const S* src = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      if (iy < 0 || iy >= g.h) {
        std::fill(dst + oy * wo, dst + (oy + 1) * wo, S(0));
        continue;
      }
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = ox * g.stride - g.pad + kx;
        dst[oy * wo + ox] = (ix >= 0 && ix < g.w) ? src[iy * g.w + ix] : S(0);
      }
    }
  }
}

template <typename S>
void col2im_add(const ConvGeom& g, const S* cols, S* dx) {
  const int ho = g.hout(), wo = g.wout();
  const int kk = g.k * g.k;
  const std::ptrdiff_t work = static_cast<std::ptrdiff_t>(g.cin) * kk * ho * wo;
  // Each channel owns a disjoint slice of dx.
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (int c = 0; c < g.cin; ++c) {
    S* dst = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int q = 0; q < kk; ++q) {
      const int ky = q / g.k, kx = q % g.k;
      const S* src = cols + (static_cast<std::size_t>(c) * kk + q) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (int ox = 0; ox < wo; ++ox) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix >= 0 && ix < g.w) dst[iy * g.w + ix] += src[oy * wo + ox];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename S>
std::vector<S>& scratch() {
  thread_local std::vector<S> buf;
  return buf;
}

}  // namespace

template <typename S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, const S* b, S beta, S* c) {
  Eigen::Map<RowMat<S>> C(c, m, n);
  if (beta == S(0)) {
    C.setZero();
  } else if (beta != S(1)) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  Eigen::Map<const RowMat<S>> A(a, trans_a ? k : m, trans_a ? m : k);
  Eigen::Map<const RowMat<S>> B(b, trans_b ? n : k, trans_b ? k : n);
  if (!trans_a && !trans_b) {
    C.noalias() += alpha * A * B;
  } else if (trans_a && !trans_b) {
    C.noalias() += alpha * A.transpose() * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += alpha * A * B.transpose();
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

template <typename S>
void conv2d_forward(const ConvGeom& g, const S* x, const S* w, const S* bias, S* y) {
  const int p = g.hout() * g.wout();
  const int kdim = g.cin * g.k * g.k;
  const S* cols = x;
  if (!is_pointwise(g)) {
    auto& buf = scratch<S>();
    buf.resize(static_cast<std::size_t>(kdim) * p);
    im2col(g, x, buf.data());
    cols = buf.data();
  }
  gemm<S>(false, false, g.cout, p, kdim, S(1), w, cols, S(0), y);
  if (bias) {
    for (int o = 0; o < g.cout; ++o) {
      S* row = y + static_cast<std::size_t>(o) * p;
      for (int i = 0; i < p; ++i) row[i] += bias[o];
    }
  }
}

template <typename S>
void conv2d_backward(const ConvGeom& g, const S* x, const S* w, const S* dy, S* dx, S* dw, S* db) {
  const int p = g.hout() * g.wout();
  const int kdim = g.cin * g.k * g.k;
  if (db) {
    for (int o = 0; o < g.cout; ++o) {
      const S* row = dy + static_cast<std::size_t>(o) * p;
      S acc = S(0);
      for (int i = 0; i < p; ++i) acc += row[i];
      db[o] += acc;
    }
  }
  const bool pointwise = is_pointwise(g);
  if (dw) {
    const S* cols = x;
    if (!pointwise) {
      auto& buf = scratch<S>();
      buf.resize(static_cast<std::size_t>(kdim) * p);
      im2col(g, x, buf.data());
      cols = buf.data();
    }
    gemm<S>(false, true, g.cout, kdim, p, S(1), dy, cols, S(1), dw);
  }
  if (dx) {
    if (pointwise) {
      gemm<S>(true, false, kdim, p, g.cout, S(1), w, dy, S(1), dx);
    } else {
      auto& buf = scratch<S>();
      buf.resize(static_cast<std::size_t>(kdim) * p);
      gemm<S>(true, false, kdim, p, g.cout, S(1), w, dy, S(0), buf.data());
      col2im_add(g, buf.data(), dx);
    }
  }
}

int dynamic_filter_size(std::span<const int> widths) {
  int n = 0;
  for (std::size_t l = 1; l < widths.size(); ++l) n += widths[l - 1] * widths[l] + widths[l];
  return n;
}

template <typename S>
void dynamic_conv_forward(std::span<const int> widths, const S* x, const S* filter, int pixels, S* out) {
  std::vector<S> cur(x, x + static_cast<std::size_t>(widths[0]) * pixels), next;
  const S* params = filter;
  const std::size_t layers = widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = widths[l], o = widths[l + 1];
    next.assign(static_cast<std::size_t>(o) * pixels, S(0));
    gemm<S>(false, false, o, pixels, in, S(1), params, cur.data(), S(0), next.data());
    const S* bias = params + in * o;
    const bool last = l + 1 == layers;
    for (int r = 0; r < o; ++r) {
      S* row = next.data() + static_cast<std::size_t>(r) * pixels;
      for (int i = 0; i < pixels; ++i) row[i] = last ? row[i] + bias[r] : silu(row[i] + bias[r]);
    }
    params += in * o + o;
    cur.swap(next);
  }
  std::copy(cur.begin(), cur.begin() + pixels, out);
}

template <typename S>
void dynamic_conv_backward(std::span<const int> widths, const S* x, const S* filter, int pixels, const S* dout,
                           S* dx, S* dfilter) {
  const std::size_t layers = widths.size() - 1;
  // Forward again, keeping layer inputs and pre-activations.
  std::vector<std::vector<S>> inputs(layers), pre(layers);
  std::vector<std::size_t> offsets(layers);
  inputs[0].assign(x, x + static_cast<std::size_t>(widths[0]) * pixels);
  std::size_t off = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = widths[l], o = widths[l + 1];
    offsets[l] = off;
    const S* w = filter + off;
    const S* bias = w + in * o;
    pre[l].assign(static_cast<std::size_t>(o) * pixels, S(0));
    gemm<S>(false, false, o, pixels, in, S(1), w, inputs[l].data(), S(0), pre[l].data());
    for (int r = 0; r < o; ++r)
      for (int i = 0; i < pixels; ++i) pre[l][static_cast<std::size_t>(r) * pixels + i] += bias[r];
    if (l + 1 < layers) {
      inputs[l + 1].resize(pre[l].size());
      for (std::size_t i = 0; i < pre[l].size(); ++i) inputs[l + 1][i] = silu(pre[l][i]);
    }
    off += static_cast<std::size_t>(in) * o + o;
  }
  std::vector<S> grad(dout, dout + pixels), grad_in;
  for (std::size_t l = layers; l-- > 0;) {
    const int in = widths[l], o = widths[l + 1];
    if (l + 1 < layers) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= silu_grad(pre[l][i]);
    }
    const S* w = filter + offsets[l];
    if (dfilter) {
      S* dw = dfilter + offsets[l];
      gemm<S>(false, true, o, in, pixels, S(1), grad.data(), inputs[l].data(), S(1), dw);
      S* db = dw + in * o;
      for (int r = 0; r < o; ++r) {
        S acc = S(0);
        for (int i = 0; i < pixels; ++i) acc += grad[static_cast<std::size_t>(r) * pixels + i];
        db[r] += acc;
      }
    }
    if (l == 0 && !dx) break;
    grad_in.assign(static_cast<std::size_t>(in) * pixels, S(0));
    gemm<S>(true, false, in, pixels, o, S(1), w, grad.data(), S(0), grad_in.data());
    grad.swap(grad_in);
  }
  if (dx) {
    for (std::size_t i = 0; i < grad.size(); ++i) dx[i] += grad[i];
  }
}

namespace reference {

template <typename S>
void conv2d_forward(const ConvGeom& g, const S* x, const S* w, const S* bias, S* y) {
  const int ho = g.hout(), wo = g.wout();
  for (int o = 0; o < g.cout; ++o)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        S acc = bias ? bias[o] : S(0);
        for (int c = 0; c < g.cin; ++c)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
              acc += w[((o * g.cin + c) * g.k + ky) * g.k + kx] * x[(c * g.h + iy) * g.w + ix];
            }
        y[(o * ho + oy) * wo + ox] = acc;
      }
}

template <typename S>
void conv2d_backward(const ConvGeom& g, const S* x, const S* w, const S* dy, S* dx, S* dw, S* db) {
  const int ho = g.hout(), wo = g.wout();
  for (int o = 0; o < g.cout; ++o)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const S gy = dy[(o * ho + oy) * wo + ox];
        if (db) db[o] += gy;
        for (int c = 0; c < g.cin; ++c)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
              const int wi = ((o * g.cin + c) * g.k + ky) * g.k + kx;
              const int xi = (c * g.h + iy) * g.w + ix;
              if (dw) dw[wi] += gy * x[xi];
              if (dx) dx[xi] += gy * w[wi];
            }
      }
}

template <typename S>
void dynamic_conv_forward(std::span<const int> widths, const S* x, const S* filter, int pixels, S* out) {
  const std::size_t layers = widths.size() - 1;
  std::vector<S> cur, next;
  for (int px = 0; px < pixels; ++px) {
    cur.resize(widths[0]);
    for (int c = 0; c < widths[0]; ++c) cur[c] = x[static_cast<std::size_t>(c) * pixels + px];
    const S* params = filter;
    for (std::size_t l = 0; l < layers; ++l) {
      const int in = widths[l], o = widths[l + 1];
      next.assign(o, S(0));
      for (int r = 0; r < o; ++r) {
        S acc = params[in * o + r];
        for (int c = 0; c < in; ++c) acc += params[r * in + c] * cur[c];
        next[r] = l + 1 == layers ? acc : silu(acc);
      }
      params += in * o + o;
      cur.swap(next);
    }
    out[px] = cur[0];
  }
}

}  // namespace reference

#define RVOS_INSTANTIATE_KERNELS(S)                                                                        \
  template void gemm<S>(bool, bool, int, int, int, S, const S*, const S*, S, S*);                          \
  template void conv2d_forward<S>(const ConvGeom&, const S*, const S*, const S*, S*);                      \
  template void conv2d_backward<S>(const ConvGeom&, const S*, const S*, const S*, S*, S*, S*);             \
  template void dynamic_conv_forward<S>(std::span<const int>, const S*, const S*, int, S*);                \
  template void dynamic_conv_backward<S>(std::span<const int>, const S*, const S*, int, const S*, S*, S*); \
  template void reference::conv2d_forward<S>(const ConvGeom&, const S*, const S*, const S*, S*);           \
  template void reference::conv2d_backward<S>(const ConvGeom&, const S*, const S*, const S*, S*, S*, S*);  \
  template void reference::dynamic_conv_forward<S>(std::span<const int>, const S*, const S*, int, S*);

RVOS_INSTANTIATE_KERNELS(float)
RVOS_INSTANTIATE_KERNELS(double)

}  // namespace rvos::kernels
