#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "rvos/data.hpp"

namespace rvos::metrics {

using data::Mask;

/// |A n B| / |A u B|; two empty masks score 1.
double iou(const Mask& pred, const Mask& gt);

/// Boundary F-measure with a disk tolerance of ceil(tol_fraction * image diagonal) pixels.
double boundary_f(const Mask& pred, const Mask& gt, double tol_fraction = 0.008);

/// One-pixel foreground boundary: foreground pixels with a 4-neighbour that is background or off-image.
Mask boundary_map(const Mask& m);

/// Fraction of IoUs above `threshold` (strictly, unless `inclusive`).
double precision_at(std::span<const double> ious, double threshold, bool inclusive = false);
/// Mean of precision_at over 0.50, 0.55, ..., 0.95.
double mean_ap(std::span<const double> ious, bool inclusive = false);

struct VideoScore {
  std::string id;
  double J = 0.0;
  double F = 0.0;
};

struct EvalReport {
  double J_mean = 0.0;
  double F_mean = 0.0;
  double JF_mean = 0.0;
  std::map<std::string, double> precision_at;  // "0.5" .. "0.9"
  double map_50_95 = 0.0;
  std::vector<VideoScore> per_video;
  /// Predicted foreground pixels on frames whose ground truth is empty.
  long long empty_frame_false_positive_pixels = 0;
};

/// Per-video predicted probability maps [H, W] in [0, 1], one per frame.
struct VideoPrediction {
  std::string id;
  std::vector<Tensor<float>> probs;
};

struct EvalOptions {
  double binarize_threshold = 0.5;
  double tol_fraction = 0.008;
  bool inclusive_precision = false;
};

/// `gt[v][t]` is the ground-truth mask of frame t of video v (same order as predictions).
EvalReport evaluate(std::span<const VideoPrediction> predictions, const std::vector<std::vector<Mask>>& gt,
                    const EvalOptions& opts = {});

Mask binarize(const Tensor<float>& probs, double threshold);

std::string report_to_json(const EvalReport& r);

}  // namespace rvos::metrics
