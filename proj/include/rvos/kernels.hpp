#pragma once

// Numeric kernels behind the autodiff ops. The default namespace holds the
// OpenMP/GEMM versions used for training; `reference` holds direct serial loops
// kept as test oracles and benchmark baselines.

#include <span>
#include <vector>

namespace rvos::kernels {

struct ConvGeom {
  int cin = 0, h = 0, w = 0;
  int cout = 0, k = 1, stride = 1, pad = 0;

  int hout() const { return (h + 2 * pad - k) / stride + 1; }
  int wout() const { return (w + 2 * pad - k) / stride + 1; }
};

/// Row-major C = alpha * op(A) * op(B) + beta * C with op(A) [m,k], op(B) [k,n].
template <typename S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, const S* b, S beta, S* c);

/// y[cout, hout, wout] = conv(x[cin, h, w], w[cout, cin, k, k]) + bias; bias may be null.
template <typename S>
void conv2d_forward(const ConvGeom& g, const S* x, const S* w, const S* bias, S* y);

/// Accumulates into dx, dw, db (each may be null to skip).
template <typename S>
void conv2d_backward(const ConvGeom& g, const S* x, const S* w, const S* dy, S* dx, S* dw, S* db);

/// Number of parameters of a 1x1 dynamic conv stack with the given layer widths
/// (widths.front() = input channels, widths.back() = 1).
int dynamic_filter_size(std::span<const int> widths);

/// Applies a stack of per-pixel linear layers with SiLU between them.
/// x: [widths[0], pixels]; filter: flat weights (per layer [out,in] weights then [out] bias); out: [pixels].
template <typename S>
void dynamic_conv_forward(std::span<const int> widths, const S* x, const S* filter, int pixels, S* out);

template <typename S>
void dynamic_conv_backward(std::span<const int> widths, const S* x, const S* filter, int pixels, const S* dout,
                           S* dx, S* dfilter);

/// Flushes denormal floats to zero on every thread of the OpenMP pool (x86 only).
/// Denormals appear as weights settle and slow arithmetic down by an order of magnitude.
void flush_denormals();

namespace reference {

template <typename S>
void conv2d_forward(const ConvGeom& g, const S* x, const S* w, const S* bias, S* y);

template <typename S>
void conv2d_backward(const ConvGeom& g, const S* x, const S* w, const S* dy, S* dx, S* dw, S* db);

template <typename S>
void dynamic_conv_forward(std::span<const int> widths, const S* x, const S* filter, int pixels, S* out);

}  // namespace reference

}  // namespace rvos::kernels
