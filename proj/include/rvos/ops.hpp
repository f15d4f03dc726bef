#pragma once

// Differentiable operations on ad::Var. Conventions: images are [C,H,W],
// matrices [rows, cols], scalars [1].

#include <span>
#include <vector>

#include "rvos/autodiff.hpp"

namespace rvos::ad {

template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, S factor);
template <typename S> Var<S> add_scalar(Var<S> a, S offset);
template <typename S> Var<S> silu(Var<S> x);
template <typename S> Var<S> sigmoid(Var<S> x);
template <typename S> Var<S> reshape(Var<S> x, Shape shape);
/// Stops gradient flow; the result is a constant copy.
template <typename S> Var<S> detach(Var<S> x);

/// Sum of all elements -> [1].
template <typename S> Var<S> sum(Var<S> x);
/// Sum of a list of [1] scalars (empty list -> constant 0).
template <typename S> Var<S> sum_scalars(Tape<S>& tape, std::span<const Var<S>> terms);

/// op(a) [m,k] x op(b) [k,n].
template <typename S> Var<S> matmul(Var<S> a, Var<S> b, bool trans_a = false, bool trans_b = false);
/// x [n,in] -> x * w^T + b with w [out,in], b [out] (b may be invalid).
template <typename S> Var<S> linear(Var<S> x, Var<S> w, Var<S> b);
template <typename S> Var<S> transpose(Var<S> x);
/// Row-wise softmax of [m,n].
template <typename S> Var<S> softmax_rows(Var<S> x);
/// Columns [c0, c1) of [m,n].
template <typename S> Var<S> slice_cols(Var<S> x, int c0, int c1);
template <typename S> Var<S> concat_cols(std::span<const Var<S>> parts);
/// Concatenates along the leading dimension (channels for images, rows for matrices).
template <typename S> Var<S> concat0(Var<S> a, Var<S> b);
template <typename S> Var<S> gather_rows(Var<S> x, std::span<const int> rows);
/// Mean over rows of [n,d] -> [1,d].
template <typename S> Var<S> mean_rows(Var<S> x);
/// table [V,C], ids -> [L,C].
template <typename S> Var<S> embedding(Var<S> table, std::span<const int> ids);

/// x [cin,h,w], w [cout,cin,k,k], b [cout] (may be invalid).
template <typename S> Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad);
/// Nearest-neighbour 2x upsampling of [C,H,W].
template <typename S> Var<S> upsample2x(Var<S> x);

/// Per-pixel 1x1 conv stack; x [widths[0],h,w], filter flat -> logits [h,w].
template <typename S> Var<S> dynamic_conv(Var<S> x, Var<S> filter, std::vector<int> widths);

/// Max over axis of a [h,w] grid (axis 0 -> [w], axis 1 -> [h]); ties route to the first maximum.
template <typename S> Var<S> max_along(Var<S> x, int axis);

/// 1 - (2 sum p*y + eps) / (sum p + sum y + eps).
template <typename S> Var<S> dice_loss(Var<S> probs, const Tensor<S>& target, S eps);
/// Mean sigmoid focal loss computed from logits.
template <typename S> Var<S> focal_loss(Var<S> logits, const Tensor<S>& target, S alpha, S gamma);
/// Mean of -log sigmoid(q.k) over positives and -log(1 - sigmoid(q.k)) over negatives;
/// q [1,D] or [D], keys [n,D], positive[i] marks row i. Dot products are clamped to [-clamp, clamp].
template <typename S>
Var<S> pairwise_contrast(Var<S> q, Var<S> keys, const std::vector<char>& positive, S clamp);

}  // namespace rvos::ad
