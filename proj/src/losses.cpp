#include "rvos/losses.hpp"

#include <vector>

namespace rvos::losses {

using ad::Var;

void LossWeights::validate() const {
  for (double v : {dice, focal, focal_alpha, focal_gamma, mil, smooth_eps})
    if (!(v >= 0.0)) throw UsageError("loss weights must be non-negative");
  if (focal_alpha > 1.0) throw UsageError("focal_alpha must lie in [0, 1]");
}

LgcfsMode parse_lgcfs_mode(const std::string& s) {
  if (s == "off") return LgcfsMode::Off;
  if (s == "first_frame") return LgcfsMode::FirstFrame;
  if (s == "full_avg") return LgcfsMode::FullAvg;
  if (s == "full_noavg") return LgcfsMode::FullNoAvg;
  throw UsageError("unknown lgcfs mode '" + s + "' (off|first_frame|full_avg|full_noavg)");
}

std::string to_string(LgcfsMode m) {
  switch (m) {
    case LgcfsMode::Off: return "off";
    case LgcfsMode::FirstFrame: return "first_frame";
    case LgcfsMode::FullAvg: return "full_avg";
    case LgcfsMode::FullNoAvg: return "full_noavg";
  }
  return "off";
}

template <typename S>
Var<S> dice_loss(Var<S> probs, const Tensor<S>& target, const LossWeights& w) {
  return ad::dice_loss(probs, target, static_cast<S>(w.smooth_eps));
}

template <typename S>
Var<S> focal_loss(Var<S> logits, const Tensor<S>& target, const LossWeights& w) {
  return ad::focal_loss(logits, target, static_cast<S>(w.focal_alpha), static_cast<S>(w.focal_gamma));
}

template <typename S>
Var<S> mask_loss(Var<S> logits, const Tensor<S>& target, const LossWeights& w) {
  if (logits.shape() != target.shape)
    throw ShapeError("mask_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape));
  Var<S> d = dice_loss(ad::sigmoid(logits), target, w);
  Var<S> f = focal_loss(logits, target, w);
  return ad::add(ad::scale(d, static_cast<S>(w.dice)), ad::scale(f, static_cast<S>(w.focal)));
}

template <typename S>
Var<S> mil_box_loss(Var<S> logits, const Box& box, const LossWeights& w) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw ShapeError("mil_box_loss: logits must be [h,w]");
  if (box.empty()) throw DataError("mil_box_loss: degenerate box");
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > s[1] || box.y1 > s[0])
    throw DataError("mil_box_loss: box outside the prediction grid");
  Var<S> p = ad::sigmoid(logits);
  Tensor<S> tx({s[1]}), ty({s[0]});
  for (int c = box.x0; c < box.x1; ++c) tx[c] = S(1);
  for (int r = box.y0; r < box.y1; ++r) ty[r] = S(1);
  Var<S> px = ad::max_along(p, 0);
  Var<S> py = ad::max_along(p, 1);
  return ad::add(dice_loss(px, tx, w), dice_loss(py, ty, w));
}

template <typename S>
Var<S> seg_loss(Var<S> logits, const SupervisionTarget<S>& target, const LossWeights& w) {
  switch (target.kind) {
    case TargetKind::Mask: return mask_loss(logits, target.mask, w);
    case TargetKind::Box: return ad::scale(mil_box_loss(logits, target.box, w), static_cast<S>(w.mil));
    case TargetKind::None: break;
  }
  return logits.tape->constant(Tensor<S>({1}));
}

template <typename S>
Var<S> lgcfs_loss(ad::Tape<S>& tape, std::span<const Var<S>> cross_logits, const SupervisionTarget<S>& target,
                  LgcfsMode mode, int box_frames, const LossWeights& w) {
  const bool applies = target.kind == TargetKind::Mask ||
                       (target.kind == TargetKind::Box && (mode == LgcfsMode::FullAvg || mode == LgcfsMode::FullNoAvg));
  if (mode == LgcfsMode::Off || cross_logits.empty() || !applies) return tape.constant(Tensor<S>({1}));
  std::vector<Var<S>> terms;
  terms.reserve(cross_logits.size());
  for (const auto& m : cross_logits) terms.push_back(seg_loss(m, target, w));
  Var<S> total = ad::sum_scalars<S>(tape, terms);
  if (target.kind == TargetKind::Box && mode == LgcfsMode::FullAvg && box_frames > 0)
    total = ad::scale(total, S(1) / static_cast<S>(box_frames));
  return total;
}

template <typename S>
Tensor<S> downsample_nearest(const Tensor<S>& mask, int factor) {
  if (mask.shape.size() != 2 || mask.shape[0] % factor != 0 || mask.shape[1] % factor != 0)
    throw ShapeError("downsample_nearest: mask " + shape_str(mask.shape) + " not divisible by " + std::to_string(factor));
  const int h = mask.shape[0] / factor, wd = mask.shape[1] / factor;
  Tensor<S> out({h, wd});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < wd; ++j) out.at(i, j) = mask.at(i * factor + factor / 2, j * factor + factor / 2);
  return out;
}

#define RVOS_INSTANTIATE_LOSSES(S)                                                                             \
  template Var<S> dice_loss<S>(Var<S>, const Tensor<S>&, const LossWeights&);                                  \
  template Var<S> focal_loss<S>(Var<S>, const Tensor<S>&, const LossWeights&);                                 \
  template Var<S> mask_loss<S>(Var<S>, const Tensor<S>&, const LossWeights&);                                  \
  template Var<S> mil_box_loss<S>(Var<S>, const Box&, const LossWeights&);                                     \
  template Var<S> seg_loss<S>(Var<S>, const SupervisionTarget<S>&, const LossWeights&);                        \
  template Var<S> lgcfs_loss<S>(ad::Tape<S>&, std::span<const Var<S>>, const SupervisionTarget<S>&, LgcfsMode, \
                                int, const LossWeights&);                                                      \
  template Tensor<S> downsample_nearest<S>(const Tensor<S>&, int);

RVOS_INSTANTIATE_LOSSES(float)
RVOS_INSTANTIATE_LOSSES(double)

}  // namespace rvos::losses
