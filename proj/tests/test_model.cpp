#include <doctest.h>

#include <cmath>

#include "rvos/errors.hpp"
#include "testing.hpp"

using namespace rvos;
using ad::Tape;
using ad::Var;

namespace {

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape == b.shape);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

// x + concat_h softmax(q_h k_h^T / sqrt(C)) v_h with explicit loops.
Tensor<double> attention_oracle(const model::ParamMap<double>& p, const std::string& pre, const Tensor<double>& x,
                                const Tensor<double>& src, int heads) {
  const int n = x.shape[0], m = src.shape[0], c = x.shape[1], dh = c / heads;
  auto proj = [&](const Tensor<double>& in, const std::string& which) {
    const auto& w = p.at(pre + "." + which + ".w");
    const auto& b = p.at(pre + "." + which + ".b");
    Tensor<double> out({in.shape[0], c});
    for (int i = 0; i < in.shape[0]; ++i)
      for (int o = 0; o < c; ++o) {
        double acc = b[o];
        for (int k = 0; k < c; ++k) acc += w.at(o, k) * in.at(i, k);
        out.at(i, o) = acc;
      }
    return out;
  };
  const auto q = proj(x, "q"), k = proj(src, "k"), v = proj(src, "v");
  Tensor<double> out = x;
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -1e300;
      for (int j = 0; j < m; ++j) {
        double acc = 0;
        for (int d = 0; d < dh; ++d) acc += q.at(i, h * dh + d) * k.at(j, h * dh + d);
        s[j] = acc / std::sqrt(static_cast<double>(c));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (int d = 0; d < dh; ++d) {
        double acc = 0;
        for (int j = 0; j < m; ++j) acc += s[j] / z * v.at(j, h * dh + d);
        out.at(i, h * dh + d) += acc;
      }
    }
  return out;
}

}  // namespace

TEST_CASE("default architecture sizes") {
  model::ModelConfig c;
  c.vocab_size = 14;
  model::Model<float> m(c);
  CHECK(c.filter_widths() == std::vector<int>{32, 8, 8, 1});
  CHECK(c.filter_size() == 345);
  const std::size_t conv3 = 9;
  const std::size_t expected =
      (16 * 3 * conv3 + 16) + (32 * 16 * conv3 + 32) + (64 * 32 * conv3 + 64) + (128 * 64 * conv3 + 128) +
      (64 * 128 * conv3 + 64)                      // encoder
      + 14 * 64                                    // word table
      + 3 * 3 * (64 * 64 + 64) + 64                // three attention blocks, pooling
      + (64 + 1) + (64 * 64 + 64) + (345 * 64 + 345)  // filter generator
      + (32 * 64 + 32) + (32 * 128 + 32) + (32 * 64 + 32) + (32 * 32 + 32) + (32 * 32 * conv3 + 32)  // FPN
      + 2 * (32 * 32 * conv3 + 32) + (32 * 64 + 32)                                                 // BLCL head
      + (32 * 32 * conv3 + 32) + (32 * 64 * conv3 + 32) + (32 * 32 * conv3 + 32);                   // enhancement
  CHECK(m.parameter_count() == expected);
  CHECK(expected == 312410);
}

TEST_CASE("attention blocks match the dense oracle") {
  for (int s = 0; s < 5; ++s) {
    auto cfg = testing::tiny_model_config(14, s);
    model::Model<double> m(cfg);
    std::mt19937_64 rng(20 + s);
    const auto f = testing::random_tensor({7, cfg.embed_dim}, rng), r = testing::random_tensor({3, cfg.embed_dim}, rng);
    Tape<double> t;
    auto b = m.bind(t, false);
    const auto l2v = m.l2v_attention(b, t.constant(f), t.constant(r)).value();
    const auto v2l = m.v2l_attention(b, t.constant(r), t.constant(f)).value();
    CHECK(max_rel(l2v, attention_oracle(m.params(), "l2v", f, r, cfg.n_attn_heads)) < 1e-9);
    CHECK(max_rel(v2l, attention_oracle(m.params(), "v2l", r, f, cfg.n_attn_heads)) < 1e-9);
  }
}

TEST_CASE("dynamic filter generation matches a direct computation") {
  auto cfg = testing::tiny_model_config();
  model::Model<double> m(cfg);
  std::mt19937_64 rng(7);
  const int L = 4, C = cfg.embed_dim;
  const auto r_hat = testing::random_tensor({L, C}, rng), sentence = testing::random_tensor({1, C}, rng);
  Tape<double> t;
  auto b = m.bind(t, false);
  const auto filt = m.make_dynamic_filter(b, t.constant(r_hat), t.constant(sentence));
  const auto& p = m.params();
  std::vector<double> score(L);
  for (int l = 0; l < L; ++l) {
    score[l] = p.at("filter.lambda.b")[0];
    for (int c = 0; c < C; ++c) score[l] += p.at("filter.lambda.w")[c] * r_hat.at(l, c);
  }
  const double mx = *std::max_element(score.begin(), score.end());
  double z = 0;
  for (auto& v : score) z += (v = std::exp(v - mx));
  std::vector<double> fused(C);
  for (int c = 0; c < C; ++c) {
    fused[c] = sentence[c];
    for (int l = 0; l < L; ++l) fused[c] += score[l] / z * r_hat.at(l, c);
  }
  for (int l = 0; l < L; ++l) CHECK(filt.lambda.value()[l] == doctest::Approx(score[l] / z).epsilon(1e-12));
  std::vector<double> hidden(C);
  for (int o = 0; o < C; ++o) {
    double a = p.at("filter.mlp1.b")[o];
    for (int c = 0; c < C; ++c) a += p.at("filter.mlp1.w").at(o, c) * fused[c];
    hidden[o] = a / (1 + std::exp(-a));
  }
  const int n = cfg.filter_size();
  REQUIRE(filt.weights.shape() == Shape{n});
  for (int o = 0; o < n; ++o) {
    double a = p.at("filter.mlp2.b")[o];
    for (int c = 0; c < C; ++c) a += p.at("filter.mlp2.w").at(o, c) * hidden[c];
    CHECK(filt.weights.value()[o] == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("clip forward produces stride-consistent features") {
  model::ModelConfig c;
  c.vocab_size = 14;
  model::Model<float> m(c);
  std::mt19937_64 rng(3);
  const auto frames = testing::random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
  Tape<float> t;
  auto b = m.bind(t, false);
  const std::vector<int> tokens{0, 3, 7};
  const auto out = m.forward_clip(b, frames, tokens);
  REQUIRE(out.frames.size() == 2);
  const auto& f = out.frames[0];
  CHECK(f.visual.f1.shape() == Shape{32, 16, 16});
  CHECK(f.visual.f2.shape() == Shape{64, 8, 8});
  CHECK(f.visual.f3.shape() == Shape{128, 4, 4});
  CHECK(f.visual.f4.shape() == Shape{64, 2, 2});
  CHECK(f.f_hat.shape() == Shape{64, 2, 2});
  CHECK(f.r_hat.shape() == Shape{3, 64});
  CHECK(f.f_fpn.shape() == Shape{32, 16, 16});
  CHECK(f.h.shape() == Shape{32, 16, 16});
  CHECK(f.f_enh.shape() == Shape{32, 16, 16});
  CHECK(f.logits.shape() == Shape{16, 16});
  CHECK(f.filter.lambda.shape() == Shape{1, 3});
  CHECK(out.sentence_proj.shape() == Shape{1, 32});
  double lambda_sum = 0;
  for (float v : f.filter.lambda.value().data) lambda_sum += v;
  CHECK(lambda_sum == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("baseline head segments on the FPN output") {
  model::ModelConfig c;
  c.vocab_size = 14;
  c.use_enhanced = false;
  model::Model<float> m(c);
  CHECK(c.filter_widths().front() == c.fpn_out_channels);
  std::mt19937_64 rng(4);
  Tape<float> t;
  auto b = m.bind(t, false);
  const std::vector<int> tokens{1, 2};
  const auto out = m.forward_clip(b, testing::random_tensor<float>({1, 3, 32, 32}, rng, 0, 1), tokens);
  CHECK_FALSE(out.frames[0].h.valid());
  CHECK(out.frames[0].seg_features().id == out.frames[0].f_fpn.id);
}

TEST_CASE("initialization is seeded and per-parameter") {
  auto c = testing::tiny_model_config(14, 5);
  model::Model<float> a(c), b(c);
  CHECK(a.params() == b.params());
  c.seed = 6;
  model::Model<float> d(c);
  CHECK_FALSE(a.params().at("visual.stem.w").data == d.params().at("visual.stem.w").data);
  for (const auto& [name, t] : a.params())
    if (name.size() > 2 && name.substr(name.size() - 2) == ".b")
      for (float v : t.data) CHECK(v == 0.0f);
}

TEST_CASE("constructor validates supplied parameters") {
  auto c = testing::tiny_model_config();
  model::Model<float> a(c);
  auto params = a.params();
  params.erase("fpn.top.w");
  CHECK_THROWS_AS(model::Model<float>(c, params), DataError);
  params = a.params();
  params.at("fpn.top.w").shape = {1, 1};
  CHECK_THROWS(model::Model<float>(c, params));
  params = a.params();
  params.emplace("extra.w", Tensor<float>({1}));
  CHECK_THROWS_AS(model::Model<float>(c, params), DataError);
  CHECK_NOTHROW(model::Model<float>(c, a.params()));
}

TEST_CASE("configuration and input errors") {
  model::ModelConfig c;
  CHECK_THROWS_AS(c.validate(), UsageError);  // vocab_size unset
  c.vocab_size = 14;
  c.n_attn_heads = 5;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = testing::tiny_model_config();
  model::Model<float> m(c);
  Tape<float> t;
  auto b = m.bind(t, false);
  const std::vector<int> bad{0, 99};
  CHECK_THROWS_AS(m.encode_language(b, bad), DataError);
  CHECK_THROWS_AS(m.encode_visual(b, t.constant(Tensor<float>({3, 40, 32}))), ShapeError);
}

TEST_CASE("bilinear upsampling with half-pixel centres") {
  Tensor<double> in({2, 2}, std::vector<double>{0, 1, 2, 3});
  const auto out = model::upsample_bilinear(in, 4, 4);
  // Row 0 samples y = 0 (clamped), column weights 1, .75/.25, .25/.75, 1.
  CHECK(out.at(0, 0) == doctest::Approx(0.0));
  CHECK(out.at(0, 1) == doctest::Approx(0.25));
  CHECK(out.at(0, 2) == doctest::Approx(0.75));
  CHECK(out.at(0, 3) == doctest::Approx(1.0));
  CHECK(out.at(1, 0) == doctest::Approx(0.5));
  CHECK(out.at(3, 3) == doctest::Approx(3.0));
  Tensor<double> flat({4, 4}, 2.5);
  for (double v : model::upsample_bilinear(flat, 16, 16).data) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("backbone parameter group") {
  CHECK(model::is_backbone_param("visual.stem.w"));
  CHECK(model::is_backbone_param("visual.stage4.b"));
  CHECK_FALSE(model::is_backbone_param("lang.embed"));
  CHECK_FALSE(model::is_backbone_param("fpn.top.w"));
}
