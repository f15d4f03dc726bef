#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rvos/autodiff.hpp"
#include "rvos/ops.hpp"

namespace rvos::model {

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;                       // C
  std::vector<int> encoder_channels{32, 64, 128, 64};  // strides 4, 8, 16, 32; last must equal C
  int stem_channels = 16;
  int n_attn_heads = 4;
  int filter_layers = 3;
  int filter_hidden = 8;
  int blcl_dim = 32;                        // D
  int fpn_out_channels = 32;
  int enh_channels = 32;
  /// Segment on the enhanced feature (SimRVOS + BLCL head) instead of the FPN output.
  bool use_enhanced = true;
  std::uint64_t seed = 0;

  void validate() const;
  /// Widths of the dynamic 1x1 conv stack, input width first, ending in 1.
  std::vector<int> filter_widths() const;
  int filter_size() const;
  int segment_channels() const { return use_enhanced ? enh_channels : fpn_out_channels; }
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors, ordered by name.
template <typename S>
using ParamMap = std::map<std::string, Tensor<S>>;

/// Parameters visible inside one tape.
template <typename S>
struct Bound {
  std::map<std::string, ad::Var<S>> vars;
  ad::Var<S> operator()(const std::string& name) const;
};

template <typename S>
struct VisualFeatures {
  ad::Var<S> f1, f2, f3, f4;
};

template <typename S>
struct LanguageFeatures {
  ad::Var<S> words;     // [L, C]
  ad::Var<S> sentence;  // [1, C]
};

template <typename S>
struct DynamicFilter {
  ad::Var<S> weights;  // flat, filter_size()
  ad::Var<S> lambda;   // [1, L]
};

/// Per-frame intermediate results (FeatureBundle).
template <typename S>
struct FrameFeatures {
  VisualFeatures<S> visual;
  ad::Var<S> f_hat;    // [C, h32, w32]
  ad::Var<S> r_hat;    // [L, C]
  ad::Var<S> f_fpn;    // [fpn, h4, w4]
  ad::Var<S> h;        // [D, h4, w4]; invalid when use_enhanced is off
  ad::Var<S> f_enh;    // [enh, h4, w4]; invalid when use_enhanced is off
  DynamicFilter<S> filter;
  ad::Var<S> logits;   // [h4, w4], own-frame filter
  /// Feature map the dynamic filters act on (f_enh or f_fpn).
  ad::Var<S> seg_features() const { return f_enh.valid() ? f_enh : f_fpn; }
};

template <typename S>
struct ClipOutputs {
  LanguageFeatures<S> language;
  ad::Var<S> sentence_proj;  // [1, D], sentence feature in the embedding space of H
  std::vector<FrameFeatures<S>> frames;
};

template <typename S>
class Model {
 public:
  explicit Model(ModelConfig cfg);
  Model(ModelConfig cfg, ParamMap<S> params);

  const ModelConfig& config() const { return cfg_; }
  const ParamMap<S>& params() const { return params_; }
  ParamMap<S>& params() { return params_; }
  std::size_t parameter_count() const;

  /// Places every parameter on the tape as a leaf (trainable) or constant.
  Bound<S> bind(ad::Tape<S>& tape, bool trainable = true) const;

  VisualFeatures<S> encode_visual(const Bound<S>& p, ad::Var<S> frame) const;
  /// Raw table lookup, before the self-attention block.
  ad::Var<S> word_embeddings(const Bound<S>& p, std::span<const int> tokens) const;
  LanguageFeatures<S> encode_language(const Bound<S>& p, std::span<const int> tokens) const;
  /// F [HW, C], R [L, C] -> F + softmax(q(F) k(R)^T / sqrt(C)) v(R), per head.
  ad::Var<S> l2v_attention(const Bound<S>& p, ad::Var<S> f, ad::Var<S> r) const;
  /// R [L, C], F [HW, C] -> R + softmax(q(R) k(F)^T / sqrt(C)) v(F), with separate parameters.
  ad::Var<S> v2l_attention(const Bound<S>& p, ad::Var<S> r, ad::Var<S> f) const;
  DynamicFilter<S> make_dynamic_filter(const Bound<S>& p, ad::Var<S> r_hat, ad::Var<S> sentence) const;
  ad::Var<S> fpn_fuse(const Bound<S>& p, ad::Var<S> f_hat, ad::Var<S> f1, ad::Var<S> f2, ad::Var<S> f3) const;
  ad::Var<S> blcl_head(const Bound<S>& p, ad::Var<S> f_fpn) const;
  ad::Var<S> enhance(const Bound<S>& p, ad::Var<S> f_fpn, ad::Var<S> h) const;
  ad::Var<S> project_sentence(const Bound<S>& p, ad::Var<S> sentence) const;
  /// Applies a dynamic filter (from any frame) to a feature map -> logits [h, w].
  ad::Var<S> segment(ad::Var<S> features, ad::Var<S> filter) const;

  FrameFeatures<S> forward_frame(const Bound<S>& p, ad::Var<S> frame, const LanguageFeatures<S>& lang) const;
  /// frames [T, 3, H, W].
  ClipOutputs<S> forward_clip(const Bound<S>& p, const Tensor<S>& frames, std::span<const int> tokens) const;

 private:
  ad::Var<S> attention(const Bound<S>& p, const std::string& prefix, ad::Var<S> query_src, ad::Var<S> kv_src) const;
  void init_params();

  ModelConfig cfg_;
  ParamMap<S> params_;
};

/// Frame slice [3, H, W] of a [T, 3, H, W] tensor.
template <typename S>
Tensor<S> frame_slice(const Tensor<S>& frames, int t);

/// Bilinear resize of logits [h, w] to [H, W] (align_corners = false).
template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& logits, int out_h, int out_w);

/// True for parameters of the visual encoder (the "backbone" learning-rate group).
bool is_backbone_param(const std::string& name);

}  // namespace rvos::model
