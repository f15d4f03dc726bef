#include "rvos/model.hpp"

#include <cmath>
#include <random>

namespace rvos::model {

using ad::Var;

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw UsageError("model: vocab_size must be positive");
  if (encoder_channels.size() != 4) throw UsageError("model: encoder_channels needs four entries");
  if (encoder_channels.back() != embed_dim) throw UsageError("model: deepest encoder width must equal embed_dim");
  if (n_attn_heads <= 0 || embed_dim % n_attn_heads != 0)
    throw UsageError("model: embed_dim must be divisible by n_attn_heads");
  if (filter_layers < 1) throw UsageError("model: filter_layers must be >= 1");
  if (filter_hidden < 1 || blcl_dim < 1 || fpn_out_channels < 1 || enh_channels < 1)
    throw UsageError("model: channel counts must be positive");
}

std::vector<int> ModelConfig::filter_widths() const {
  std::vector<int> w{segment_channels()};
  for (int l = 0; l + 1 < filter_layers; ++l) w.push_back(filter_hidden);
  w.push_back(1);
  return w;
}

int ModelConfig::filter_size() const {
  const auto w = filter_widths();
  int n = 0;
  for (std::size_t l = 1; l < w.size(); ++l) n += w[l - 1] * w[l] + w[l];
  return n;
}

bool is_backbone_param(const std::string& name) { return name.rfind("visual.", 0) == 0; }

template <typename S>
Var<S> Bound<S>::operator()(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw UsageError("unknown parameter " + name);
  return it->second;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Uniform in [-bound, bound) from a generator seeded by (model seed, name).
template <typename S>
Tensor<S> uniform_tensor(Shape shape, double bound, std::uint64_t seed, const std::string& name) {
  std::mt19937_64 rng(seed ^ fnv1a(name));
  Tensor<S> t(std::move(shape));
  for (auto& v : t.data) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<S>((2.0 * u - 1.0) * bound);
  }
  return t;
}

}  // namespace

template <typename S>
Model<S>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  init_params();
}

template <typename S>
Model<S>::Model(ModelConfig cfg, ParamMap<S> params) : cfg_(std::move(cfg)) {
  cfg_.validate();
  init_params();
  for (auto& [name, t] : params) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("checkpoint has unknown parameter " + name);
    if (it->second.shape != t.shape)
      throw DataError("checkpoint parameter " + name + " has shape " + shape_str(t.shape) + ", expected " +
                      shape_str(it->second.shape));
    it->second = std::move(t);
  }
  if (params.size() != params_.size()) {
    for (const auto& [name, t] : params_)
      if (!params.count(name)) throw DataError("checkpoint is missing parameter " + name);
  }
}

template <typename S>
void Model<S>::init_params() {
  params_.clear();
  const auto seed = cfg_.seed;
  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    const double fan_in = static_cast<double>(cin) * k * k;
    params_[name + ".w"] = uniform_tensor<S>({cout, cin, k, k}, std::sqrt(6.0 / fan_in), seed, name + ".w");
    params_[name + ".b"] = Tensor<S>({cout});
  };
  auto lin = [&](const std::string& name, int out, int in, bool bias = true) {
    params_[name + ".w"] = uniform_tensor<S>({out, in}, std::sqrt(3.0 / in), seed, name + ".w");
    if (bias) params_[name + ".b"] = Tensor<S>({out});
  };
  const int c = cfg_.embed_dim;
  const auto& enc = cfg_.encoder_channels;

  conv("visual.stem", cfg_.stem_channels, 3, 3);
  conv("visual.stage1", enc[0], cfg_.stem_channels, 3);
  conv("visual.stage2", enc[1], enc[0], 3);
  conv("visual.stage3", enc[2], enc[1], 3);
  conv("visual.stage4", enc[3], enc[2], 3);

  params_["lang.embed"] = uniform_tensor<S>({cfg_.vocab_size, c}, std::sqrt(3.0), seed, "lang.embed");
  for (const char* pre : {"lang.attn", "l2v", "v2l"}) {
    lin(std::string(pre) + ".q", c, c);
    lin(std::string(pre) + ".k", c, c);
    lin(std::string(pre) + ".v", c, c);
  }
  lin("lang.pool", 1, c, false);

  lin("filter.lambda", 1, c);
  lin("filter.mlp1", c, c);
  lin("filter.mlp2", cfg_.filter_size(), c);

  const int fpn = cfg_.fpn_out_channels;
  conv("fpn.top", fpn, c, 1);
  conv("fpn.lat3", fpn, enc[2], 1);
  conv("fpn.lat2", fpn, enc[1], 1);
  conv("fpn.lat1", fpn, enc[0], 1);
  conv("fpn.out", fpn, fpn, 3);

  conv("blcl.conv1", cfg_.blcl_dim, fpn, 3);
  conv("blcl.conv2", cfg_.blcl_dim, cfg_.blcl_dim, 3);
  lin("blcl.text", cfg_.blcl_dim, c);

  conv("enh.proj", fpn, fpn, 3);
  conv("enh.conv1", cfg_.enh_channels, fpn + cfg_.blcl_dim, 3);
  conv("enh.conv2", cfg_.enh_channels, cfg_.enh_channels, 3);
}

template <typename S>
std::size_t Model<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

template <typename S>
Bound<S> Model<S>::bind(ad::Tape<S>& tape, bool trainable) const {
  Bound<S> b;
  for (const auto& [name, t] : params_) b.vars[name] = trainable ? tape.leaf(t) : tape.constant(t);
  return b;
}

template <typename S>
VisualFeatures<S> Model<S>::encode_visual(const Bound<S>& p, Var<S> frame) const {
  const auto& s = frame.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("encode_visual: expected [3,H,W], got " + shape_str(s));
  if (s[1] % 32 != 0 || s[2] % 32 != 0) throw ShapeError("encode_visual: H and W must be divisible by 32");
  auto block = [&](Var<S> x, const std::string& name) {
    return ad::silu(ad::conv2d(x, p(name + ".w"), p(name + ".b"), 2, 1));
  };
  VisualFeatures<S> out;
  out.f1 = block(block(frame, "visual.stem"), "visual.stage1");
  out.f2 = block(out.f1, "visual.stage2");
  out.f3 = block(out.f2, "visual.stage3");
  out.f4 = block(out.f3, "visual.stage4");
  return out;
}

template <typename S>
Var<S> Model<S>::word_embeddings(const Bound<S>& p, std::span<const int> tokens) const {
  if (tokens.empty()) throw DataError("encode_language: empty token sequence");
  return ad::embedding(p("lang.embed"), tokens);
}

template <typename S>
LanguageFeatures<S> Model<S>::encode_language(const Bound<S>& p, std::span<const int> tokens) const {
  Var<S> e = word_embeddings(p, tokens);
  LanguageFeatures<S> out;
  out.words = attention(p, "lang.attn", e, e);
  Var<S> scores = ad::linear(out.words, p("lang.pool.w"), Var<S>{});        // [L,1]
  Var<S> weights = ad::softmax_rows(ad::transpose(scores));                   // [1,L]
  out.sentence = ad::matmul(weights, out.words);                              // [1,C]
  return out;
}

template <typename S>
Var<S> Model<S>::attention(const Bound<S>& p, const std::string& prefix, Var<S> query_src, Var<S> kv_src) const {
  const int c = cfg_.embed_dim;
  if (query_src.shape().size() != 2 || query_src.shape()[1] != c || kv_src.shape().size() != 2 ||
      kv_src.shape()[1] != c)
    throw ShapeError(prefix + ": inputs must be [n," + std::to_string(c) + "]");
  Var<S> q = ad::linear(query_src, p(prefix + ".q.w"), p(prefix + ".q.b"));
  Var<S> k = ad::linear(kv_src, p(prefix + ".k.w"), p(prefix + ".k.b"));
  Var<S> v = ad::linear(kv_src, p(prefix + ".v.w"), p(prefix + ".v.b"));
  const int heads = cfg_.n_attn_heads;
  const int dh = c / heads;
  const S inv_sqrt_c = S(1) / std::sqrt(static_cast<S>(c));
  std::vector<Var<S>> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var<S> kh = heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var<S> vh = heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Var<S> attn = ad::softmax_rows(ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt_c));
    outs.push_back(ad::matmul(attn, vh));
  }
  Var<S> mixed = heads == 1 ? outs[0] : ad::concat_cols<S>(outs);
  return ad::add(query_src, mixed);
}

template <typename S>
Var<S> Model<S>::l2v_attention(const Bound<S>& p, Var<S> f, Var<S> r) const {
  return attention(p, "l2v", f, r);
}

template <typename S>
Var<S> Model<S>::v2l_attention(const Bound<S>& p, Var<S> r, Var<S> f) const {
  return attention(p, "v2l", r, f);
}

template <typename S>
DynamicFilter<S> Model<S>::make_dynamic_filter(const Bound<S>& p, Var<S> r_hat, Var<S> sentence) const {
  DynamicFilter<S> out;
  Var<S> scores = ad::linear(r_hat, p("filter.lambda.w"), p("filter.lambda.b"));  // [L,1]
  out.lambda = ad::softmax_rows(ad::transpose(scores));                            // [1,L]
  Var<S> fused = ad::add(sentence, ad::matmul(out.lambda, r_hat));                 // [1,C]
  Var<S> hidden = ad::silu(ad::linear(fused, p("filter.mlp1.w"), p("filter.mlp1.b")));
  Var<S> flat = ad::linear(hidden, p("filter.mlp2.w"), p("filter.mlp2.b"));
  out.weights = ad::reshape(flat, {cfg_.filter_size()});
  return out;
}

template <typename S>
Var<S> Model<S>::fpn_fuse(const Bound<S>& p, Var<S> f_hat, Var<S> f1, Var<S> f2, Var<S> f3) const {
  auto proj = [&](Var<S> x, const std::string& name) { return ad::conv2d(x, p(name + ".w"), p(name + ".b"), 1, 0); };
  auto check = [](Var<S> small, Var<S> big) {
    if (small.shape()[1] * 2 != big.shape()[1] || small.shape()[2] * 2 != big.shape()[2])
      throw ShapeError("fpn_fuse: inputs are not stride-consistent");
  };
  check(f_hat, f3);
  check(f3, f2);
  check(f2, f1);
  Var<S> x = proj(f_hat, "fpn.top");
  x = ad::add(ad::upsample2x(x), proj(f3, "fpn.lat3"));
  x = ad::add(ad::upsample2x(x), proj(f2, "fpn.lat2"));
  x = ad::add(ad::upsample2x(x), proj(f1, "fpn.lat1"));
  return ad::silu(ad::conv2d(x, p("fpn.out.w"), p("fpn.out.b"), 1, 1));
}

template <typename S>
Var<S> Model<S>::blcl_head(const Bound<S>& p, Var<S> f_fpn) const {
  Var<S> x = ad::silu(ad::conv2d(f_fpn, p("blcl.conv1.w"), p("blcl.conv1.b"), 1, 1));
  return ad::conv2d(x, p("blcl.conv2.w"), p("blcl.conv2.b"), 1, 1);
}

template <typename S>
Var<S> Model<S>::enhance(const Bound<S>& p, Var<S> f_fpn, Var<S> h) const {
  Var<S> x = ad::silu(ad::conv2d(f_fpn, p("enh.proj.w"), p("enh.proj.b"), 1, 1));
  x = ad::concat0(x, h);
  x = ad::silu(ad::conv2d(x, p("enh.conv1.w"), p("enh.conv1.b"), 1, 1));
  return ad::silu(ad::conv2d(x, p("enh.conv2.w"), p("enh.conv2.b"), 1, 1));
}

template <typename S>
Var<S> Model<S>::project_sentence(const Bound<S>& p, Var<S> sentence) const {
  return ad::linear(sentence, p("blcl.text.w"), p("blcl.text.b"));
}

template <typename S>
Var<S> Model<S>::segment(Var<S> features, Var<S> filter) const {
  return ad::dynamic_conv(features, filter, cfg_.filter_widths());
}

template <typename S>
FrameFeatures<S> Model<S>::forward_frame(const Bound<S>& p, Var<S> frame, const LanguageFeatures<S>& lang) const {
  FrameFeatures<S> out;
  out.visual = encode_visual(p, frame);
  const auto& s4 = out.visual.f4.shape();
  const int c = s4[0], h = s4[1], w = s4[2];
  Var<S> flat = ad::transpose(ad::reshape(out.visual.f4, {c, h * w}));  // [HW, C]
  Var<S> f_hat_flat = l2v_attention(p, flat, lang.words);
  out.r_hat = v2l_attention(p, lang.words, flat);
  out.f_hat = ad::reshape(ad::transpose(f_hat_flat), {c, h, w});
  out.filter = make_dynamic_filter(p, out.r_hat, lang.sentence);
  out.f_fpn = fpn_fuse(p, out.f_hat, out.visual.f1, out.visual.f2, out.visual.f3);
  if (cfg_.use_enhanced) {
    out.h = blcl_head(p, out.f_fpn);
    out.f_enh = enhance(p, out.f_fpn, out.h);
  }
  out.logits = segment(out.seg_features(), out.filter.weights);
  return out;
}

template <typename S>
ClipOutputs<S> Model<S>::forward_clip(const Bound<S>& p, const Tensor<S>& frames, std::span<const int> tokens) const {
  if (frames.shape.size() != 4 || frames.shape[1] != 3) throw ShapeError("forward_clip: frames must be [T,3,H,W]");
  ad::Tape<S>& tape = *p.vars.begin()->second.tape;
  ClipOutputs<S> out;
  out.language = encode_language(p, tokens);
  out.sentence_proj = project_sentence(p, out.language.sentence);
  for (int t = 0; t < frames.shape[0]; ++t) {
    Var<S> frame = tape.constant(frame_slice(frames, t));
    out.frames.push_back(forward_frame(p, frame, out.language));
  }
  return out;
}

template <typename S>
Tensor<S> frame_slice(const Tensor<S>& frames, int t) {
  const int c = frames.shape[1], h = frames.shape[2], w = frames.shape[3];
  const std::size_t n = static_cast<std::size_t>(c) * h * w;
  Tensor<S> out({c, h, w});
  std::copy_n(frames.data.begin() + static_cast<std::ptrdiff_t>(n * t), n, out.data.begin());
  return out;
}

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& logits, int out_h, int out_w) {
  const int h = logits.shape[0], w = logits.shape[1];
  Tensor<S> out({out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int i = 0; i < out_h; ++i) {
    double fy = std::max(0.0, (i + 0.5) * sy - 0.5);
    int y0 = std::min(static_cast<int>(fy), h - 1);
    int y1 = std::min(y0 + 1, h - 1);
    double ay = fy - y0;
    for (int j = 0; j < out_w; ++j) {
      double fx = std::max(0.0, (j + 0.5) * sx - 0.5);
      int x0 = std::min(static_cast<int>(fx), w - 1);
      int x1 = std::min(x0 + 1, w - 1);
      double ax = fx - x0;
      const double top = (1 - ax) * logits.at(y0, x0) + ax * logits.at(y0, x1);
      const double bot = (1 - ax) * logits.at(y1, x0) + ax * logits.at(y1, x1);
      out.at(i, j) = static_cast<S>((1 - ay) * top + ay * bot);
    }
  }
  return out;
}

template struct Bound<float>;
template struct Bound<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> frame_slice(const Tensor<float>&, int);
template Tensor<double> frame_slice(const Tensor<double>&, int);
template Tensor<float> upsample_bilinear(const Tensor<float>&, int, int);
template Tensor<double> upsample_bilinear(const Tensor<double>&, int, int);

}  // namespace rvos::model
