#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rvos/box.hpp"
#include "rvos/ops.hpp"

namespace rvos::contrast {

struct BlclConfig {
  double d_th = 0.9;
  int max_samples_per_frame = 256;  // per class
  bool pseudo_enabled = true;
  bool lv_enabled = true;
  bool cc_enabled = true;
  int pseudo_start_epoch = 1;

  void validate() const;
  bool any_enabled() const { return lv_enabled || cc_enabled; }
  bool operator==(const BlclConfig&) const = default;
};

/// Foreground / background grid locations (row-major indices into [h*w]) of one frame.
struct PixelPartition {
  std::vector<int> fg;
  std::vector<int> bg;
  int ignored = 0;
};

inline constexpr double kLogitClamp = 30.0;

/// Foreground where mask = 1, background elsewhere; each class capped at `cap` samples.
template <typename S>
PixelPartition partition_with_mask(const Tensor<S>& mask, int cap, std::uint64_t seed);

/// Inside the box: score > d_th -> fg, score < 1 - d_th -> bg, otherwise ignored.
/// Every location outside the box is bg; without a box every location is bg.
template <typename S>
PixelPartition partition_with_pseudo(const Tensor<S>& probs, const std::optional<Box>& box, double d_th, int cap,
                                     std::uint64_t seed);

/// Box frame before pseudo masks are available: outside-box bg only, inside ignored.
PixelPartition partition_outside_box(int h, int w, const Box& box, int cap, std::uint64_t seed);

/// Keeps at most `cap` entries, chosen by a seeded shuffle, in ascending order.
void subsample(std::vector<int>& idx, int cap, std::uint64_t seed);

/// H [D, h, w] -> one embedding per row [h*w, D].
template <typename S>
ad::Var<S> embedding_rows(ad::Var<S> h);

/// Mean over K+ u K- of -log sigmoid(q.k) (positives) / -log(1 - sigmoid(q.k)) (negatives).
/// q [1,D]; pos [n+,D]; neg [n-,D]. Both empty -> 0.
template <typename S>
ad::Var<S> pairwise_contrast(ad::Var<S> q, ad::Var<S> pos, ad::Var<S> neg);

/// One frame's embeddings [h*w, D] with its partition.
template <typename S>
struct FrameSamples {
  ad::Var<S> rows;
  PixelPartition partition;
};

template <typename S>
struct ClassSamples {
  ad::Var<S> fg;  // [n_fg, D]
  ad::Var<S> bg;  // [n_bg, D]
};

template <typename S>
ClassSamples<S> collect(ad::Tape<S>& tape, std::span<const FrameSamples<S>> frames, int dim);

/// Sentence embedding against every frame's fg (positive) and bg (negative).
template <typename S>
ad::Var<S> lv_contrast(ad::Var<S> sentence, const ClassSamples<S>& samples);

template <typename S>
struct ConsistencyTerms {
  ad::Var<S> fg;
  ad::Var<S> bg;
  bool empty_foreground = false;
};

/// Clip-mean fg/bg embeddings as anchors against all fg/bg samples.
template <typename S>
ConsistencyTerms<S> cc_contrast(ad::Tape<S>& tape, const ClassSamples<S>& samples);

template <typename S>
struct BlclTerms {
  ad::Var<S> lv;
  ad::Var<S> cc_fg;
  ad::Var<S> cc_bg;
  ad::Var<S> total;
  bool empty_foreground = false;
  int fg_samples = 0;
  int bg_samples = 0;
};

template <typename S>
BlclTerms<S> blcl_loss(ad::Tape<S>& tape, ad::Var<S> sentence, std::span<const FrameSamples<S>> frames,
                       const BlclConfig& cfg);

}  // namespace rvos::contrast
