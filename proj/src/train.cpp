#include "rvos/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "rvos/errors.hpp"
#include "rvos/kernels.hpp"
#include "rvos/math.hpp"

namespace rvos::train {

using ad::Var;
using losses::TargetKind;
using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Box flip_box(const Box& b, int W) { return Box{W - b.x1, b.y0, W - b.x0, b.y1}; }

void check_finite(double v, const char* term, const std::string& video, const LossReport& r) {
  if (std::isfinite(v)) return;
  std::ostringstream os;
  os << "non-finite loss term '" << term << "' on clip of video " << video << " (seg=" << r.seg
     << " lgcfs=" << r.lgcfs << " lv=" << r.lv << " cc_fg=" << r.cc_fg << " cc_bg=" << r.cc_bg << ")";
  throw NumericError(os.str());
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw DataError("checkpoint: unreadable rng state");
  return rng;
}

// Keeps the log lines whose step is at most `last_step`.
void truncate_log(const std::filesystem::path& path, std::int64_t last_step) {
  std::ifstream is(path);
  if (!is) return;
  std::vector<std::string> kept;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::int64_t>() <= last_step) kept.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : kept) os << l << "\n";
}

}  // namespace

template <typename S>
Clip<S> make_clip(const data::VideoSample& video, const data::WeakAnnotation& ann, int start, int len, bool flip) {
  const int T = video.num_frames(), H = video.height(), W = video.width();
  if (start < 0 || len < 1 || start + len > T) throw ShapeError("make_clip: window outside the video");
  Clip<S> c;
  c.video_id = video.id;
  c.start = start;
  c.tokens = video.tokens;
  c.frames = Tensor<S>({len, 3, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int t = 0; t < len; ++t)
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int sx = flip ? W - 1 - x : x;
          c.frames.data[(static_cast<std::size_t>(t) * 3 + ch) * plane + static_cast<std::size_t>(y) * W + x] =
              static_cast<S>(video.frames.data[(static_cast<std::size_t>(start + t) * 3 + ch) * plane +
                                               static_cast<std::size_t>(y) * W + sx]) /
              S(255);
        }
  for (int t = 0; t < len; ++t) {
    const int g = start + t;
    if (ann.mask_frames.count(g)) {
      Tensor<S> m({H, W});
      const auto& src = video.dense_masks.at(g);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) m.at(y, x) = src.at(y, flip ? W - 1 - x : x) ? S(1) : S(0);
      c.targets.push_back(losses::SupervisionTarget<S>::from_mask(losses::downsample_nearest(m, kPredictionStride)));
    } else if (ann.box_frames.count(g)) {
      if (!video.boxes.at(g)) throw DataError("video " + video.id + ": box annotation on a frame without the object");
      Box b = flip ? flip_box(*video.boxes[g], W) : *video.boxes[g];
      c.targets.push_back(losses::SupervisionTarget<S>::from_box(rescale_box_outward(b, kPredictionStride)));
    } else {
      c.targets.push_back(losses::SupervisionTarget<S>::none());
    }
  }
  return c;
}

int sample_clip_start(int n_frames, int len, const data::WeakAnnotation& ann, ClipSampling mode,
                      std::mt19937_64& rng) {
  const int L = std::min(len, n_frames);
  int lo = 0, hi = n_frames - L;
  if (mode == ClipSampling::ContainAnnotation && !ann.mask_frames.empty()) {
    const int a = *ann.mask_frames.begin();
    if (a < 0 || a >= n_frames) throw DataError("mask frame " + std::to_string(a) + " outside a video of " + std::to_string(n_frames) + " frames");
    lo = std::max(0, a - L + 1);
    hi = std::min(a, n_frames - L);
  }
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

template <typename S>
Clip<S> sample_clip(const data::VideoSample& video, const data::WeakAnnotation& ann, const TrainConfig& cfg,
                    std::mt19937_64& rng) {
  const int start = sample_clip_start(video.num_frames(), cfg.clip_len, ann, cfg.clip_sampling, rng);
  const bool flip = cfg.hflip && (rng() & 1u);
  return make_clip<S>(video, ann, start, std::min(cfg.clip_len, video.num_frames()), flip);
}

template <typename S>
ClipLoss<S> clip_loss(const model::Model<S>& model, const model::Bound<S>& bound, ad::Tape<S>& tape,
                      const Clip<S>& clip, const TrainConfig& cfg, int epoch, std::uint64_t sample_seed) {
  const auto out = model.forward_clip(bound, clip.frames, clip.tokens);
  const int T = static_cast<int>(out.frames.size());
  if (static_cast<int>(clip.targets.size()) != T) throw ShapeError("clip_loss: one target per frame expected");
  const auto& w = cfg.loss_weights;
  ClipLoss<S> res;

  std::vector<Var<S>> seg_terms;
  for (int t = 0; t < T; ++t) seg_terms.push_back(losses::seg_loss(out.frames[t].logits, clip.targets[t], w));
  Var<S> seg = ad::sum_scalars<S>(tape, seg_terms);

  std::vector<Var<S>> lgcfs_terms;
  const int box_frames = static_cast<int>(std::count_if(
      clip.targets.begin(), clip.targets.end(), [](const auto& tg) { return tg.kind == TargetKind::Box; }));
  const bool full = cfg.lgcfs_mode == losses::LgcfsMode::FullAvg || cfg.lgcfs_mode == losses::LgcfsMode::FullNoAvg;
  if (cfg.lgcfs_mode != losses::LgcfsMode::Off && T > 1) {
    for (int t = 0; t < T; ++t) {
      const auto& tg = clip.targets[t];
      if (!(tg.kind == TargetKind::Mask || (tg.kind == TargetKind::Box && full))) continue;
      std::vector<Var<S>> cross;
      for (int tau = 0; tau < T; ++tau)
        if (tau != t) cross.push_back(model.segment(out.frames[t].seg_features(), out.frames[tau].filter.weights));
      Var<S> term = losses::lgcfs_loss<S>(tape, cross, tg, cfg.lgcfs_mode, box_frames, w);
      (tg.kind == TargetKind::Mask ? res.diag.lgcfs_mask : res.diag.lgcfs_box) += static_cast<double>(term.item());
      lgcfs_terms.push_back(term);
    }
  }
  Var<S> lgcfs = ad::sum_scalars<S>(tape, lgcfs_terms);

  std::vector<Var<S>> totals{seg, lgcfs};
  if (cfg.blcl.any_enabled()) {
    if (!out.frames.empty() && !out.frames[0].h.valid())
      throw UsageError("BLCL terms need the enhanced head (use_enhanced)");
    std::vector<contrast::FrameSamples<S>> samples;
    const int cap = cfg.blcl.max_samples_per_frame;
    for (int t = 0; t < T; ++t) {
      const auto& tg = clip.targets[t];
      if (tg.kind == TargetKind::None) continue;
      const auto& fr = out.frames[t];
      const int h = fr.h.shape()[1], wd = fr.h.shape()[2];
      const std::uint64_t seed = mix(sample_seed, static_cast<std::uint64_t>(t));
      contrast::PixelPartition part;
      if (tg.kind == TargetKind::Mask) {
        part = contrast::partition_with_mask(tg.mask, cap, seed);
      } else if (cfg.blcl.pseudo_enabled && epoch >= cfg.blcl.pseudo_start_epoch) {
        Tensor<S> probs({h, wd});
        const auto& lg = fr.logits.value();
        for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid(lg[i]);
        part = contrast::partition_with_pseudo(probs, std::optional<Box>(tg.box), cfg.blcl.d_th, cap, seed);
        res.diag.box_frame_fg_samples += static_cast<long>(part.fg.size());
      } else {
        part = contrast::partition_outside_box(h, wd, tg.box, cap, seed);
        res.diag.box_frame_fg_samples += static_cast<long>(part.fg.size());
      }
      samples.push_back({contrast::embedding_rows(fr.h), std::move(part)});
    }
    const auto terms = contrast::blcl_loss<S>(tape, out.sentence_proj, samples, cfg.blcl);
    res.report.lv = static_cast<double>(terms.lv.item());
    res.report.cc_fg = static_cast<double>(terms.cc_fg.item());
    res.report.cc_bg = static_cast<double>(terms.cc_bg.item());
    res.diag.fg_samples = terms.fg_samples;
    res.diag.bg_samples = terms.bg_samples;
    res.diag.empty_foreground_clips = terms.empty_foreground ? 1 : 0;
    totals.push_back(terms.total);
  }
  res.total = ad::sum_scalars<S>(tape, totals);
  res.report.seg = static_cast<double>(seg.item());
  res.report.lgcfs = static_cast<double>(lgcfs.item());
  res.report.total = static_cast<double>(res.total.item());
  const auto& r = res.report;
  check_finite(r.seg, "seg", clip.video_id, r);
  check_finite(r.lgcfs, "lgcfs", clip.video_id, r);
  check_finite(r.lv, "lv", clip.video_id, r);
  check_finite(r.cc_fg, "cc_fg", clip.video_id, r);
  check_finite(r.cc_bg, "cc_bg", clip.video_id, r);
  check_finite(r.total, "total", clip.video_id, r);
  return res;
}

double lr_scale(const TrainConfig& cfg, int epoch) {
  const auto n = std::count_if(cfg.lr_decay_epochs.begin(), cfg.lr_decay_epochs.end(), [&](int e) { return e <= epoch; });
  return std::pow(cfg.lr_decay_factor, static_cast<double>(n));
}

void adamw_update(model::ParamMap<float>& params, const model::ParamMap<float>& grads, OptimizerState& opt,
                  double lr, double lr_backbone, double weight_decay) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++opt.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = opt.m.try_emplace(name, p.shape).first->second;
    auto& v = opt.v.try_emplace(name, p.shape).first->second;
    const double a = model::is_backbone_param(name) ? lr_backbone : lr;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
      const double step = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      p[i] = static_cast<float>(p[i] - a * weight_decay * p[i] - a * step);
    }
  }
}

StepResult train_step(model::Model<float>& model, OptimizerState& opt, std::span<const Clip<float>> clips,
                      const TrainConfig& cfg, int epoch, std::uint64_t step_seed) {
  if (clips.empty()) throw UsageError("train_step: empty batch");
  kernels::flush_denormals();
  const std::size_t n = clips.size();
  std::vector<model::ParamMap<float>> grads(n);
  std::vector<ClipLoss<float>> losses_(n);
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static) if (n > 1)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      ad::Tape<float> tape;
      const auto bound = model.bind(tape, true);
      auto cl = clip_loss(model, bound, tape, clips[i], cfg, epoch, mix(step_seed, i));
      tape.backward(cl.total);
      for (const auto& [name, var] : bound.vars) {
        Tensor<float> g(var.shape());
        if (tape.has_grad(var.id)) g.data = tape.grad(var.id);
        grads[i].emplace(name, std::move(g));
      }
      cl.total = {};
      losses_[i] = std::move(cl);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  StepResult res;
  model::ParamMap<float> avg = std::move(grads[0]);
  for (std::size_t i = 1; i < n; ++i)
    for (auto& [name, g] : avg) {
      const auto& gi = grads[i].at(name);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += gi[k];
    }
  double sq = 0.0;
  for (auto& [name, g] : avg)
    for (auto& x : g.data) {
      x /= static_cast<float>(n);
      sq += static_cast<double>(x) * x;
    }
  res.diag.grad_norm = std::sqrt(sq);
  if (!std::isfinite(res.diag.grad_norm)) throw NumericError("non-finite gradient norm");
  if (cfg.grad_clip_norm > 0 && res.diag.grad_norm > cfg.grad_clip_norm) {
    const float s = static_cast<float>(cfg.grad_clip_norm / res.diag.grad_norm);
    for (auto& [name, g] : avg)
      for (auto& x : g.data) x *= s;
  }

  for (const auto& cl : losses_) {
    res.report.seg += cl.report.seg / n;
    res.report.lgcfs += cl.report.lgcfs / n;
    res.report.lv += cl.report.lv / n;
    res.report.cc_fg += cl.report.cc_fg / n;
    res.report.cc_bg += cl.report.cc_bg / n;
    res.report.total += cl.report.total / n;
    res.diag.fg_samples += cl.diag.fg_samples;
    res.diag.bg_samples += cl.diag.bg_samples;
    res.diag.box_frame_fg_samples += cl.diag.box_frame_fg_samples;
    res.diag.lgcfs_mask += cl.diag.lgcfs_mask / n;
    res.diag.lgcfs_box += cl.diag.lgcfs_box / n;
    res.diag.empty_foreground_clips += cl.diag.empty_foreground_clips;
  }
  const double scale = lr_scale(cfg, epoch);
  res.diag.lr = cfg.lr * scale;
  res.diag.lr_backbone = cfg.lr_backbone * scale;
  adamw_update(model.params(), avg, opt, res.diag.lr, res.diag.lr_backbone, cfg.weight_decay);
  return res;
}

std::string log_line(std::int64_t step, int epoch, const StepResult& r) {
  json j{{"step", step},
         {"epoch", epoch},
         {"seg", r.report.seg},
         {"lgcfs", r.report.lgcfs},
         {"lv", r.report.lv},
         {"cc_fg", r.report.cc_fg},
         {"cc_bg", r.report.cc_bg},
         {"total", r.report.total},
         {"lr", r.diag.lr},
         {"lr_backbone", r.diag.lr_backbone},
         {"grad_norm", r.diag.grad_norm},
         {"fg_samples", r.diag.fg_samples},
         {"bg_samples", r.diag.bg_samples},
         {"box_frame_fg_samples", r.diag.box_frame_fg_samples},
         {"lgcfs_mask", r.diag.lgcfs_mask},
         {"lgcfs_box", r.diag.lgcfs_box},
         {"empty_foreground_clips", r.diag.empty_foreground_clips}};
  return j.dump();
}

FitResult fit(const data::DatasetManifest& manifest, const TrainConfig& cfg, const FitOptions& opts) {
  cfg.validate();
  const auto idx = data::split_indices(manifest, "train");
  if (idx.empty()) throw DataError("dataset has no training videos");
  std::vector<data::VideoSample> videos;
  std::vector<data::WeakAnnotation> anns;
  for (auto i : idx) {
    videos.push_back(data::load_video(manifest, i));
    anns.push_back(data::convert_annotation(videos.back(), cfg.scheme));
  }
  std::filesystem::create_directories(opts.out_dir);
  const auto log_path = opts.out_dir / "train_log.jsonl";
  const auto last_path = opts.out_dir / "last.ckpt";
  const auto final_path = opts.out_dir / "final.ckpt";

  std::optional<model::Model<float>> model;
  OptimizerState opt;
  std::mt19937_64 rng(mix(cfg.seed, 0x5eed));
  int start_epoch = 0;
  std::int64_t step = 0;
  if (opts.resume) {
    Checkpoint ck = load_checkpoint(*opts.resume);
    check_vocabulary(ck, manifest.vocabulary);
    if (!ck.train_config || !ck.optimizer) throw DataError("checkpoint has no training state to resume from");
    if (!(*ck.train_config == cfg)) throw UsageError("resume: the training configuration differs from the checkpoint's");
    model.emplace(ck.model, std::move(ck.params));
    opt = std::move(*ck.optimizer);
    rng = rng_from_string(ck.rng_state);
    start_epoch = ck.epochs_completed;
    step = ck.step;
    truncate_log(log_path, step);
  } else {
    model.emplace(cfg.resolved_model(manifest.vocab_size()));
    std::ofstream(log_path, std::ios::trunc);
  }
  save_train_config(cfg, opts.out_dir / "config.json");
  std::ofstream log(log_path, std::ios::app);

  auto snapshot = [&](int epochs_completed) {
    Checkpoint ck;
    ck.model = model->config();
    ck.params = model->params();
    ck.vocabulary = manifest.vocabulary;
    ck.rng_state = rng_to_string(rng);
    ck.train_config = cfg;
    ck.optimizer = opt;
    ck.epochs_completed = epochs_completed;
    ck.step = step;
    return ck;
  };

  FitResult res;
  const std::size_t n = videos.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_clips);
  bool stop = false;
  int run_epochs = 0;
  int epoch = start_epoch;
  for (; epoch < cfg.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t b = 0; b < n && !stop; b += batch) {
      std::vector<Clip<float>> clips;
      for (std::size_t k = b; k < std::min(n, b + batch); ++k)
        clips.push_back(sample_clip<float>(videos[order[k]], anns[order[k]], cfg, rng));
      const StepResult r = train_step(*model, opt, clips, cfg, epoch, mix(cfg.seed, static_cast<std::uint64_t>(step)));
      ++step;
      res.last = r.report;
      log << log_line(step, epoch, r) << "\n";
      if (opts.progress && step % 50 == 0)
        *opts.progress << "epoch " << epoch << " step " << step << " loss " << r.report.total << std::endl;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }
    log.flush();
    ++run_epochs;
    const bool last = stop || epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.checkpoint_every_epochs == 0 || last) save_checkpoint(snapshot(epoch + 1), last_path);
    if (opts.stop_after_epochs > 0 && run_epochs >= opts.stop_after_epochs && !last) {
      res.steps = step;
      res.epochs_completed = epoch + 1;
      res.checkpoint = last_path;
      return res;
    }
  }
  save_checkpoint(snapshot(epoch), final_path);
  res.steps = step;
  res.epochs_completed = epoch;
  res.checkpoint = final_path;
  return res;
}

std::vector<Tensor<float>> predict_video(const model::Model<float>& model, const data::VideoSample& video) {
  const Tensor<float> frames = video.frames_float();
  const int H = video.height(), W = video.width();
  std::vector<Tensor<float>> out;
  for (int t = 0; t < video.num_frames(); ++t) {
    ad::Tape<float> tape;
    const auto bound = model.bind(tape, false);
    const auto lang = model.encode_language(bound, video.tokens);
    const auto fr = model.forward_frame(bound, tape.constant(model::frame_slice(frames, t)), lang);
    Tensor<float> p = model::upsample_bilinear(fr.logits.value(), H, W);
    for (auto& x : p.data) x = sigmoid(x);
    out.push_back(std::move(p));
  }
  return out;
}

model::Model<float> model_from_checkpoint(const Checkpoint& ck) { return model::Model<float>(ck.model, ck.params); }

metrics::EvalReport evaluate_split(const model::Model<float>& model, const data::DatasetManifest& manifest,
                                   const std::string& split, const metrics::EvalOptions& opts) {
  const auto idx = data::split_indices(manifest, split);
  if (idx.empty()) throw DataError("dataset has no videos in split '" + split + "'");
  std::vector<metrics::VideoPrediction> preds;
  std::vector<std::vector<metrics::Mask>> gt;
  for (auto i : idx) {
    data::VideoSample v = data::load_video(manifest, i);
    preds.push_back({v.id, predict_video(model, v)});
    gt.push_back(std::move(v.dense_masks));
  }
  return metrics::evaluate(preds, gt, opts);
}

#define RVOS_INSTANTIATE_TRAIN(S)                                                                                  \
  template Clip<S> make_clip<S>(const data::VideoSample&, const data::WeakAnnotation&, int, int, bool);           \
  template Clip<S> sample_clip<S>(const data::VideoSample&, const data::WeakAnnotation&, const TrainConfig&,      \
                                  std::mt19937_64&);                                                              \
  template ClipLoss<S> clip_loss<S>(const model::Model<S>&, const model::Bound<S>&, ad::Tape<S>&, const Clip<S>&, \
                                    const TrainConfig&, int, std::uint64_t);

RVOS_INSTANTIATE_TRAIN(float)
RVOS_INSTANTIATE_TRAIN(double)

}  // namespace rvos::train
