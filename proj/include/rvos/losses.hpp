#pragma once

#include <span>
#include <string>

#include "rvos/box.hpp"
#include "rvos/ops.hpp"

namespace rvos::losses {

struct LossWeights {
  double dice = 5.0;
  double focal = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double mil = 1.0;
  double smooth_eps = 1e-6;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

enum class TargetKind { Mask, Box, None };

/// Per-frame supervision at prediction (stride-4) resolution.
template <typename S>
struct SupervisionTarget {
  TargetKind kind = TargetKind::None;
  Tensor<S> mask;  // [h, w] binary, present for Mask
  Box box;         // grid coordinates, present for Box

  static SupervisionTarget none() { return {}; }
  static SupervisionTarget from_mask(Tensor<S> m) { return {TargetKind::Mask, std::move(m), {}}; }
  static SupervisionTarget from_box(const Box& b) { return {TargetKind::Box, {}, b}; }
};

enum class LgcfsMode { Off, FirstFrame, FullAvg, FullNoAvg };

LgcfsMode parse_lgcfs_mode(const std::string& s);
std::string to_string(LgcfsMode m);

template <typename S>
ad::Var<S> dice_loss(ad::Var<S> probs, const Tensor<S>& target, const LossWeights& w = {});

template <typename S>
ad::Var<S> focal_loss(ad::Var<S> logits, const Tensor<S>& target, const LossWeights& w = {});

/// dice * Dice(sigmoid(logits)) + focal * Focal(logits).
template <typename S>
ad::Var<S> mask_loss(ad::Var<S> logits, const Tensor<S>& target, const LossWeights& w = {});

/// Line-bag MIL: Dice between max-projections of sigmoid(logits) and the box's
/// column / row indicators. The box is in grid coordinates.
template <typename S>
ad::Var<S> mil_box_loss(ad::Var<S> logits, const Box& box, const LossWeights& w = {});

/// Mask -> mask_loss, Box -> mil * mil_box_loss, None -> 0.
template <typename S>
ad::Var<S> seg_loss(ad::Var<S> logits, const SupervisionTarget<S>& target, const LossWeights& w = {});

/// Cross-frame loss for frame t given the predictions M^{t<-tau} of every other frame's filter.
/// `box_frames` is the number of box-supervised frames in the clip (used by FullAvg).
template <typename S>
ad::Var<S> lgcfs_loss(ad::Tape<S>& tape, std::span<const ad::Var<S>> cross_logits, const SupervisionTarget<S>& target,
                      LgcfsMode mode, int box_frames, const LossWeights& w = {});

/// Nearest-neighbour downsampling of a binary [H, W] mask by an integer factor
/// (samples the centre pixel of each cell).
template <typename S>
Tensor<S> downsample_nearest(const Tensor<S>& mask, int factor);

}  // namespace rvos::losses
