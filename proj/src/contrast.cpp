#include "rvos/contrast.hpp"

#include <algorithm>
#include <random>

namespace rvos::contrast {

using ad::Var;

void BlclConfig::validate() const {
  if (!(d_th > 0.5 && d_th <= 1.0)) throw UsageError("blcl: d_th must lie in (0.5, 1]");
  if (max_samples_per_frame < 1) throw UsageError("blcl: max_samples_per_frame must be >= 1");
  if (pseudo_start_epoch < 0) throw UsageError("blcl: pseudo_start_epoch must be >= 0");
}

void subsample(std::vector<int>& idx, int cap, std::uint64_t seed) {
  if (static_cast<int>(idx.size()) <= cap) return;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `cap` slots become a uniform sample.
  for (int i = 0; i < cap; ++i) {
    const auto remaining = static_cast<std::uint64_t>(idx.size() - i);
    const auto j = i + static_cast<int>(rng() % remaining);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
}

template <typename S>
PixelPartition partition_with_mask(const Tensor<S>& mask, int cap, std::uint64_t seed) {
  if (mask.shape.size() != 2) throw ShapeError("partition_with_mask: mask must be [h,w]");
  PixelPartition p;
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) (mask[i] > S(0.5) ? p.fg : p.bg).push_back(i);
  subsample(p.fg, cap, seed);
  subsample(p.bg, cap, seed ^ 0x9e3779b97f4a7c15ull);
  return p;
}

template <typename S>
PixelPartition partition_with_pseudo(const Tensor<S>& probs, const std::optional<Box>& box, double d_th, int cap,
                                     std::uint64_t seed) {
  if (probs.shape.size() != 2) throw ShapeError("partition_with_pseudo: scores must be [h,w]");
  const int h = probs.shape[0], w = probs.shape[1];
  PixelPartition p;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (!box || !box->contains(x, y)) {
        p.bg.push_back(i);
        continue;
      }
      const double s = static_cast<double>(probs[i]);
      if (s > d_th) {
        p.fg.push_back(i);
      } else if (s < 1.0 - d_th) {
        p.bg.push_back(i);
      } else {
        ++p.ignored;
      }
    }
  subsample(p.fg, cap, seed);
  subsample(p.bg, cap, seed ^ 0x9e3779b97f4a7c15ull);
  return p;
}

PixelPartition partition_outside_box(int h, int w, const Box& box, int cap, std::uint64_t seed) {
  PixelPartition p;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (box.contains(x, y)) {
        ++p.ignored;
      } else {
        p.bg.push_back(y * w + x);
      }
    }
  subsample(p.bg, cap, seed ^ 0x9e3779b97f4a7c15ull);
  return p;
}

template <typename S>
Var<S> embedding_rows(Var<S> h) {
  const auto& s = h.shape();
  if (s.size() != 3) throw ShapeError("embedding_rows: expected [D,h,w]");
  return ad::transpose(ad::reshape(h, {s[0], s[1] * s[2]}));
}

template <typename S>
Var<S> pairwise_contrast(Var<S> q, Var<S> pos, Var<S> neg) {
  const int n_pos = pos.shape()[0], n_neg = neg.shape()[0];
  std::vector<char> labels(static_cast<std::size_t>(n_pos + n_neg), 0);
  std::fill_n(labels.begin(), n_pos, 1);
  Var<S> keys = n_neg == 0 ? pos : (n_pos == 0 ? neg : ad::concat0(pos, neg));
  return ad::pairwise_contrast(q, keys, labels, static_cast<S>(kLogitClamp));
}

template <typename S>
ClassSamples<S> collect(ad::Tape<S>& tape, std::span<const FrameSamples<S>> frames, int dim) {
  auto gather_all = [&](bool fg) {
    Var<S> acc = tape.constant(Tensor<S>({0, dim}));
    for (const auto& f : frames) {
      const auto& idx = fg ? f.partition.fg : f.partition.bg;
      if (idx.empty()) continue;
      Var<S> rows = ad::gather_rows(f.rows, std::span<const int>(idx));
      acc = acc.shape()[0] == 0 ? rows : ad::concat0(acc, rows);
    }
    return acc;
  };
  return ClassSamples<S>{gather_all(true), gather_all(false)};
}

template <typename S>
Var<S> lv_contrast(Var<S> sentence, const ClassSamples<S>& samples) {
  return pairwise_contrast(sentence, samples.fg, samples.bg);
}

template <typename S>
ConsistencyTerms<S> cc_contrast(ad::Tape<S>& tape, const ClassSamples<S>& samples) {
  ConsistencyTerms<S> out;
  const Var<S> zero = tape.constant(Tensor<S>({1}));
  if (samples.fg.shape()[0] == 0) {
    out.fg = out.bg = zero;
    out.empty_foreground = true;
    return out;
  }
  out.fg = pairwise_contrast(ad::mean_rows(samples.fg), samples.fg, samples.bg);
  out.bg = samples.bg.shape()[0] == 0 ? zero : pairwise_contrast(ad::mean_rows(samples.bg), samples.bg, samples.fg);
  return out;
}

template <typename S>
BlclTerms<S> blcl_loss(ad::Tape<S>& tape, Var<S> sentence, std::span<const FrameSamples<S>> frames,
                       const BlclConfig& cfg) {
  BlclTerms<S> out;
  const Var<S> zero = tape.constant(Tensor<S>({1}));
  out.lv = out.cc_fg = out.cc_bg = out.total = zero;
  if (frames.empty() || !cfg.any_enabled()) return out;
  const int dim = frames[0].rows.shape()[1];
  ClassSamples<S> samples = collect(tape, frames, dim);
  out.fg_samples = samples.fg.shape()[0];
  out.bg_samples = samples.bg.shape()[0];
  std::vector<Var<S>> terms;
  if (cfg.lv_enabled) {
    out.lv = lv_contrast(sentence, samples);
    terms.push_back(out.lv);
  }
  if (cfg.cc_enabled) {
    auto cc = cc_contrast(tape, samples);
    out.cc_fg = cc.fg;
    out.cc_bg = cc.bg;
    out.empty_foreground = cc.empty_foreground;
    terms.push_back(cc.fg);
    terms.push_back(cc.bg);
  }
  out.total = ad::sum_scalars<S>(tape, terms);
  return out;
}

#define RVOS_INSTANTIATE_CONTRAST(S)                                                                                \
  template PixelPartition partition_with_mask<S>(const Tensor<S>&, int, std::uint64_t);                             \
  template PixelPartition partition_with_pseudo<S>(const Tensor<S>&, const std::optional<Box>&, double, int,        \
                                                   std::uint64_t);                                                  \
  template Var<S> embedding_rows<S>(Var<S>);                                                                        \
  template Var<S> pairwise_contrast<S>(Var<S>, Var<S>, Var<S>);                                                     \
  template ClassSamples<S> collect<S>(ad::Tape<S>&, std::span<const FrameSamples<S>>, int);                         \
  template Var<S> lv_contrast<S>(Var<S>, const ClassSamples<S>&);                                                   \
  template ConsistencyTerms<S> cc_contrast<S>(ad::Tape<S>&, const ClassSamples<S>&);                                \
  template BlclTerms<S> blcl_loss<S>(ad::Tape<S>&, Var<S>, std::span<const FrameSamples<S>>, const BlclConfig&);

RVOS_INSTANTIATE_CONTRAST(float)
RVOS_INSTANTIATE_CONTRAST(double)

}  // namespace rvos::contrast
