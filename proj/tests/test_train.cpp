#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "rvos/checkpoint.hpp"
#include "rvos/errors.hpp"
#include "rvos/train.hpp"
#include "testing.hpp"

using namespace rvos;
using namespace rvos::train;
using losses::SupervisionTarget;
using rvos::testing::TempDir;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model = rvos::testing::tiny_model_config();
  c.clip_len = 3;
  c.batch_clips = 2;
  c.epochs = 2;
  c.lr_decay_epochs = {1};
  return c;
}

template <typename S>
Clip<S> random_clip(int T, std::vector<SupervisionTarget<S>> targets, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Clip<S> c;
  c.video_id = "synthetic";
  c.frames = rvos::testing::random_tensor<S>({T, 3, 32, 32}, rng, 0.0, 1.0);
  c.tokens = {1, 4, 2};
  c.targets = std::move(targets);
  return c;
}

template <typename S>
SupervisionTarget<S> block_mask(int r0, int c0) {
  Tensor<S> m({8, 8});
  for (int y = r0; y < r0 + 3; ++y)
    for (int x = c0; x < c0 + 3; ++x) m.at(y, x) = S(1);
  return SupervisionTarget<S>::from_mask(std::move(m));
}

Tensor<float> as_float(const data::Mask& m) {
  Tensor<float> out(m.shape);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i];
  return out;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <typename S>
ClipLoss<S> run_clip_loss(const TrainConfig& cfg, const Clip<S>& clip, int epoch, ad::Tape<S>& tape) {
  const model::Model<S> m(cfg.resolved_model(14));
  const auto bound = m.bind(tape);
  return clip_loss<S>(m, bound, tape, clip, cfg, epoch, 99);
}

}  // namespace

TEST_CASE("train config JSON round trip and validation") {
  TrainConfig c = tiny_train_config();
  c.lr = 1.25e-3;
  c.seed = 42;
  c.scheme = data::Scheme::WeakB;
  c.lgcfs_mode = losses::LgcfsMode::FullAvg;
  c.blcl.d_th = 0.7;
  c.blcl.pseudo_enabled = false;
  c.loss_weights.mil = 3.0;
  c.clip_sampling = ClipSampling::Uniform;
  c.hflip = true;
  c.use_enhanced = true;
  CHECK(train_config_from_json(to_json(c)) == c);
  CHECK(train_config_from_json(nlohmann::json::object()) == TrainConfig{});

  TempDir dir("cfg");
  save_train_config(c, dir / "c.json");
  CHECK(load_train_config(dir / "c.json") == c);

  CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 0.1}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"lr", "fast"}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"blcl", {{"dth", 0.5}}}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"scheme", "weak_x"}}), UsageError);

  TrainConfig bad;
  bad.use_enhanced = false;
  CHECK_THROWS_AS(bad.resolved_model(10), UsageError);
  bad.blcl.lv_enabled = bad.blcl.cc_enabled = false;
  CHECK_FALSE(bad.resolved_model(10).use_enhanced);
  CHECK(TrainConfig{}.resolved_model(10).use_enhanced);
  CHECK(TrainConfig{}.resolved_model(10).vocab_size == 10);
}

TEST_CASE("BLCL toggle lists") {
  contrast::BlclConfig b;
  apply_blcl_toggles(b, "lv");
  CHECK(b.lv_enabled);
  CHECK_FALSE(b.cc_enabled);
  CHECK_FALSE(b.pseudo_enabled);
  apply_blcl_toggles(b, "cc,pseudo");
  CHECK_FALSE(b.lv_enabled);
  CHECK(b.cc_enabled);
  CHECK(b.pseudo_enabled);
  apply_blcl_toggles(b, "none");
  CHECK_FALSE(b.any_enabled());
  CHECK_THROWS_AS(apply_blcl_toggles(b, "lv,foo"), UsageError);
}

TEST_CASE("step learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_scale(c, 0) == 1.0);
  CHECK(lr_scale(c, 14) == 1.0);
  CHECK(lr_scale(c, 15) == doctest::Approx(0.1));
  CHECK(lr_scale(c, 24) == doctest::Approx(0.1));
  CHECK(lr_scale(c, 25) == doctest::Approx(0.01));
  CHECK(lr_scale(c, 29) == doctest::Approx(0.01));
  c.lr_decay_epochs = {3, 3};
  CHECK(lr_scale(c, 2) == 1.0);
  CHECK(lr_scale(c, 3) == doctest::Approx(0.01));
}

TEST_CASE("AdamW update against a scalar oracle") {
  model::ParamMap<float> params, grads;
  params.emplace("visual.w", Tensor<float>({1}, std::vector<float>{0.5f}));
  params.emplace("head.w", Tensor<float>({1}, std::vector<float>{-2.0f}));
  OptimizerState opt;
  const double lr = 1e-2, lr_bb = 1e-3, wd = 0.1;
  const std::vector<double> gs{0.3, -0.7, 0.05};
  double p_bb = 0.5, p_h = -2.0, m = 0, v = 0;
  for (std::size_t k = 0; k < gs.size(); ++k) {
    grads["visual.w"] = Tensor<float>({1}, std::vector<float>{static_cast<float>(gs[k])});
    grads["head.w"] = grads["visual.w"];
    adamw_update(params, grads, opt, lr, lr_bb, wd);
    m = 0.9 * m + 0.1 * gs[k];
    v = 0.999 * v + 0.001 * gs[k] * gs[k];
    const double n = static_cast<double>(k + 1);
    const double dir = (m / (1 - std::pow(0.9, n))) / (std::sqrt(v / (1 - std::pow(0.999, n))) + 1e-8);
    p_bb = p_bb * (1 - lr_bb * wd) - lr_bb * dir;
    p_h = p_h * (1 - lr * wd) - lr * dir;
  }
  CHECK(opt.step == 3);
  CHECK(params.at("visual.w")[0] == doctest::Approx(p_bb).epsilon(1e-6));
  CHECK(params.at("head.w")[0] == doctest::Approx(p_h).epsilon(1e-6));
}

TEST_CASE("clip sampling keeps the mask frame") {
  std::mt19937_64 rng(1);
  data::WeakAnnotation ann;
  ann.scheme = data::Scheme::WeakMB;
  ann.mask_frames = {7};
  ann.box_frames = {8, 9, 10};
  std::set<int> starts;
  for (int i = 0; i < 300; ++i) {
    const int s = sample_clip_start(12, 5, ann, ClipSampling::ContainAnnotation, rng);
    CHECK(s >= 3);
    CHECK(s <= 7);
    starts.insert(s);
  }
  CHECK(starts.size() == 5);
  std::set<int> uniform;
  for (int i = 0; i < 300; ++i) uniform.insert(sample_clip_start(12, 5, ann, ClipSampling::Uniform, rng));
  CHECK(uniform == std::set<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK_THROWS_AS(sample_clip_start(3, 5, ann, ClipSampling::ContainAnnotation, rng), DataError);
  ann.mask_frames = {2};
  CHECK(sample_clip_start(3, 5, ann, ClipSampling::ContainAnnotation, rng) == 0);
}

TEST_CASE("make_clip targets and horizontal flip") {
  for (int i = 0; i < 12; ++i) {
    const auto v = data::generate_video(i, 5, 64, 64, 2);
    const auto ann = data::convert_annotation(v, data::Scheme::WeakMB);
    const auto c = make_clip<float>(v, ann, 0, 5);
    const auto f = make_clip<float>(v, ann, 0, 5, true);
    CHECK(c.frames.shape == Shape{5, 3, 64, 64});
    for (int t = 0; t < 5; ++t) {
      const auto& tg = c.targets[t];
      if (ann.mask_frames.count(t)) {
        REQUIRE(tg.kind == losses::TargetKind::Mask);
        CHECK(tg.mask == losses::downsample_nearest(as_float(v.dense_masks[t]), 4));
      } else if (ann.box_frames.count(t)) {
        REQUIRE(tg.kind == losses::TargetKind::Box);
        CHECK(tg.box == rescale_box_outward(*v.boxes[t], 4));
        // Oracle: mirror the dense mask, take its tight box, rescale.
        data::Mask mirrored({64, 64});
        for (int y = 0; y < 64; ++y)
          for (int x = 0; x < 64; ++x) mirrored.at(y, x) = v.dense_masks[t].at(y, 63 - x);
        CHECK(f.targets[t].box == rescale_box_outward(*data::tight_box(mirrored), 4));
      } else {
        CHECK(tg.kind == losses::TargetKind::None);
      }
    }
    CHECK(f.frames[0 * 3 * 64 * 64 + 5 * 64 + 0] == c.frames[0 * 3 * 64 * 64 + 5 * 64 + 63]);
  }
}

TEST_CASE("loss toggles produce exact zeros") {
  TrainConfig cfg = tiny_train_config();
  cfg.lgcfs_mode = losses::LgcfsMode::Off;
  apply_blcl_toggles(cfg.blcl, "none");
  const auto clip = random_clip<double>(
      3, {block_mask<double>(1, 1), SupervisionTarget<double>::from_box({2, 2, 6, 6}), SupervisionTarget<double>::none()}, 5);
  ad::Tape<double> tape;
  const auto res = run_clip_loss(cfg, clip, 3, tape);
  CHECK(res.report.lgcfs == 0.0);
  CHECK(res.report.lv == 0.0);
  CHECK(res.report.cc_fg == 0.0);
  CHECK(res.report.cc_bg == 0.0);
  CHECK(res.report.total == res.report.seg);
  CHECK(res.report.seg > 0.0);

  cfg.lgcfs_mode = losses::LgcfsMode::FullNoAvg;
  const auto single = random_clip<double>(1, {block_mask<double>(2, 2)}, 6);
  ad::Tape<double> tape2;
  CHECK(run_clip_loss(cfg, single, 3, tape2).report.lgcfs == 0.0);
}

TEST_CASE("cross-frame term excludes the frame's own filter") {
  TrainConfig cfg = tiny_train_config();
  cfg.lgcfs_mode = losses::LgcfsMode::FirstFrame;
  apply_blcl_toggles(cfg.blcl, "none");
  const auto clip = random_clip<double>(
      3, {block_mask<double>(2, 3), SupervisionTarget<double>::none(), SupervisionTarget<double>::none()}, 7);
  ad::Tape<double> tape;
  const auto res = run_clip_loss(cfg, clip, 0, tape);

  const model::Model<double> m(cfg.resolved_model(14));
  ad::Tape<double> t2;
  const auto bound = m.bind(t2, false);
  const auto out = m.forward_clip(bound, clip.frames, clip.tokens);
  double expected = 0.0;
  for (int tau : {1, 2})
    expected += losses::seg_loss(m.segment(out.frames[0].seg_features(), out.frames[tau].filter.weights),
                                 clip.targets[0], cfg.loss_weights)
                    .item();
  CHECK(res.report.lgcfs == doctest::Approx(expected).epsilon(1e-12));
  CHECK(res.diag.lgcfs_mask == doctest::Approx(expected).epsilon(1e-12));
  CHECK(res.diag.lgcfs_box == 0.0);
  CHECK(res.report.seg == doctest::Approx(losses::seg_loss(out.frames[0].logits, clip.targets[0]).item()).epsilon(1e-12));
}

TEST_CASE("pseudo labels are gated by epoch and toggle") {
  TrainConfig cfg = tiny_train_config();
  cfg.blcl.d_th = 0.05;
  cfg.blcl.pseudo_start_epoch = 1;
  const auto clip = random_clip<float>(
      3, {block_mask<float>(1, 1), SupervisionTarget<float>::from_box({0, 0, 8, 8}),
          SupervisionTarget<float>::from_box({1, 1, 7, 7})}, 8);
  auto box_fg = [&](const TrainConfig& c, int epoch) {
    ad::Tape<float> tape;
    const auto r = run_clip_loss(c, clip, epoch, tape);
    CHECK(r.diag.fg_samples >= 9);
    return r.diag.box_frame_fg_samples;
  };
  CHECK(box_fg(cfg, 0) == 0);
  CHECK(box_fg(cfg, 1) > 0);
  cfg.blcl.pseudo_enabled = false;
  CHECK(box_fg(cfg, 1) == 0);
  CHECK(box_fg(cfg, 5) == 0);
}

TEST_CASE("non-finite losses raise a numeric error") {
  TrainConfig cfg = tiny_train_config();
  auto clip = random_clip<float>(2, {block_mask<float>(1, 1), SupervisionTarget<float>::none()}, 9);
  clip.frames[17] = std::numeric_limits<float>::quiet_NaN();
  ad::Tape<float> tape;
  try {
    run_clip_loss(cfg, clip, 0, tape);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("seg") != std::string::npos);
  }
}

TEST_CASE("train_step is deterministic and changes parameters") {
  const TrainConfig cfg = tiny_train_config();
  std::vector<Clip<float>> clips{
      random_clip<float>(3, {block_mask<float>(1, 1), SupervisionTarget<float>::from_box({2, 2, 6, 6}),
                             SupervisionTarget<float>::none()}, 10),
      random_clip<float>(3, {SupervisionTarget<float>::none(), block_mask<float>(4, 4),
                             SupervisionTarget<float>::from_box({3, 3, 8, 8})}, 11)};
  auto run = [&] {
    model::Model<float> m(cfg.resolved_model(14));
    OptimizerState opt;
    std::vector<StepResult> rs;
    for (int k = 0; k < 3; ++k) rs.push_back(train_step(m, opt, clips, cfg, 0, 1000 + k));
    return std::make_pair(m.params(), rs.back());
  };
  const auto [p1, r1] = run();
  const auto [p2, r2] = run();
  CHECK(p1 == p2);
  CHECK(r1.report == r2.report);
  CHECK(p1 != model::Model<float>(cfg.resolved_model(14)).params());
  CHECK(r1.diag.lr == doctest::Approx(cfg.lr));
  CHECK(r1.diag.grad_norm > 0.0);
  const auto line = nlohmann::json::parse(log_line(7, 0, r1));
  for (const char* k : {"step", "epoch", "seg", "lgcfs", "lv", "cc_fg", "cc_bg", "total", "lr", "grad_norm",
                        "fg_samples", "box_frame_fg_samples"})
    CHECK(line.contains(k));
  model::Model<float> m(cfg.resolved_model(14));
  OptimizerState opt;
  CHECK_THROWS_AS(train_step(m, opt, std::span<const Clip<float>>{}, cfg, 0, 0), UsageError);
}

TEST_CASE("checkpoint encoding round trip") {
  const TrainConfig cfg = tiny_train_config();
  model::Model<float> m(cfg.resolved_model(14));
  OptimizerState opt;
  std::vector<Clip<float>> clips{random_clip<float>(2, {block_mask<float>(1, 1), SupervisionTarget<float>::none()}, 12)};
  train_step(m, opt, clips, cfg, 0, 1);
  Checkpoint ck;
  ck.model = m.config();
  ck.params = m.params();
  ck.vocabulary = std::vector<std::string>(14, "w");
  for (int i = 0; i < 14; ++i) ck.vocabulary[i] += std::to_string(i);
  std::mt19937_64 rng(3);
  rng();
  std::ostringstream rs;
  rs << rng;
  ck.rng_state = rs.str();
  ck.train_config = cfg;
  ck.optimizer = opt;
  ck.epochs_completed = 1;
  ck.step = 5;

  const auto bytes = encode_checkpoint(ck);
  CHECK(encode_checkpoint(ck) == bytes);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.model == ck.model);
  CHECK(back.params == ck.params);
  CHECK(back.vocabulary == ck.vocabulary);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.train_config == ck.train_config);
  CHECK(back.optimizer == ck.optimizer);
  CHECK(back.epochs_completed == 1);
  CHECK(back.step == 5);
  CHECK(encode_checkpoint(back) == bytes);

  TempDir dir("ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  CHECK(load_checkpoint(dir / "a.ckpt").params == ck.params);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
  std::vector<std::uint8_t> junk(bytes.begin(), bytes.begin() + bytes.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(junk), DataError);

  CHECK_NOTHROW(check_vocabulary(ck, ck.vocabulary));
  auto other = ck.vocabulary;
  other.push_back("extra");
  try {
    check_vocabulary(ck, other);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).rfind("vocab mismatch", 0) == 0);
  }
}

TEST_CASE("fit writes its outputs and resumes bit-exactly") {
  TempDir dir("fit");
  const auto manifest = data::generate_dataset(dir / "data", 4, 3, 32, 32, 1, 1);
  const TrainConfig cfg = tiny_train_config();

  FitOptions a;
  a.out_dir = dir / "a";
  const auto ra = fit(manifest, cfg, a);
  CHECK(ra.epochs_completed == 2);
  CHECK(ra.steps == 4);
  for (const char* f : {"config.json", "train_log.jsonl", "last.ckpt", "final.ckpt"})
    CHECK(std::filesystem::exists(a.out_dir / f));
  CHECK(load_train_config(a.out_dir / "config.json") == cfg);
  std::ifstream log(a.out_dir / "train_log.jsonl");
  int lines = 0;
  for (std::string l; std::getline(log, l);) {
    const auto j = nlohmann::json::parse(l);
    CHECK(j.at("step") == lines + 1);
    ++lines;
  }
  CHECK(lines == 4);

  FitOptions b;
  b.out_dir = dir / "b";
  b.stop_after_epochs = 1;
  CHECK(fit(manifest, cfg, b).epochs_completed == 1);
  b.stop_after_epochs = 0;
  b.resume = b.out_dir / "last.ckpt";
  CHECK(fit(manifest, cfg, b).epochs_completed == 2);
  CHECK(read_bytes(a.out_dir / "final.ckpt") == read_bytes(b.out_dir / "final.ckpt"));
  CHECK(read_bytes(a.out_dir / "train_log.jsonl") == read_bytes(b.out_dir / "train_log.jsonl"));

  TrainConfig changed = cfg;
  changed.lr *= 2;
  CHECK_THROWS_AS(fit(manifest, changed, b), UsageError);

  const auto model = model_from_checkpoint(load_checkpoint(a.out_dir / "final.ckpt"));
  const auto probs = predict_video(model, data::load_video(manifest, 4));
  REQUIRE(probs.size() == 3);
  CHECK(probs[0].shape == Shape{32, 32});
  for (float p : probs[0].data) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
  const auto report = evaluate_split(model, manifest, "val");
  CHECK(report.per_video.size() <= 1);
  CHECK(report.J_mean >= 0.0);
}
