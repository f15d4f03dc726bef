#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rvos/checkpoint.hpp"
#include "rvos/config.hpp"
#include "rvos/metrics.hpp"

namespace rvos::train {

/// A contiguous window of one video with its supervision at prediction (stride-4) resolution.
template <typename S>
struct Clip {
  std::string video_id;
  int start = 0;
  Tensor<S> frames;  // [T, 3, H, W]
  std::vector<int> tokens;
  std::vector<losses::SupervisionTarget<S>> targets;
};

inline constexpr int kPredictionStride = 4;

/// Frames [start, start + len) of `video`; `flip` mirrors frames, masks and boxes horizontally.
template <typename S>
Clip<S> make_clip(const data::VideoSample& video, const data::WeakAnnotation& ann, int start, int len,
                  bool flip = false);

/// Start of a window of min(len, T) frames. ContainAnnotation keeps the first mask frame inside the window.
int sample_clip_start(int n_frames, int len, const data::WeakAnnotation& ann, ClipSampling mode,
                      std::mt19937_64& rng);

template <typename S>
Clip<S> sample_clip(const data::VideoSample& video, const data::WeakAnnotation& ann, const TrainConfig& cfg,
                    std::mt19937_64& rng);

struct LossReport {
  double seg = 0.0;
  double lgcfs = 0.0;
  double lv = 0.0;
  double cc_fg = 0.0;
  double cc_bg = 0.0;
  double total = 0.0;
  bool operator==(const LossReport&) const = default;
};

struct StepDiagnostics {
  long fg_samples = 0;
  long bg_samples = 0;
  /// Foreground samples taken from frames that only carry a box.
  long box_frame_fg_samples = 0;
  double lgcfs_mask = 0.0;  // cross-frame terms supervised by masks
  double lgcfs_box = 0.0;   // cross-frame terms supervised by boxes
  int empty_foreground_clips = 0;
  double grad_norm = 0.0;   // before clipping
  double lr = 0.0;
  double lr_backbone = 0.0;
};

template <typename S>
struct ClipLoss {
  ad::Var<S> total;
  LossReport report;
  StepDiagnostics diag;
};

/// Assembles sum_t (L_SEG + L_LGCFS) + L_BLCL for one clip on `tape`.
/// Partition subsampling is seeded by `sample_seed`.
template <typename S>
ClipLoss<S> clip_loss(const model::Model<S>& model, const model::Bound<S>& bound, ad::Tape<S>& tape,
                      const Clip<S>& clip, const TrainConfig& cfg, int epoch, std::uint64_t sample_seed);

/// Multiplier of the base learning rates during `epoch` (0-based): factor^(number of decay epochs <= epoch).
double lr_scale(const TrainConfig& cfg, int epoch);

/// One decoupled-weight-decay Adam update; visual.* parameters use lr_backbone.
void adamw_update(model::ParamMap<float>& params, const model::ParamMap<float>& grads, OptimizerState& opt,
                  double lr, double lr_backbone, double weight_decay);

struct StepResult {
  LossReport report;  // mean over clips
  StepDiagnostics diag;
};

/// Forward/backward over the clips (gradients averaged in clip order), clipping, then one optimizer step.
StepResult train_step(model::Model<float>& model, OptimizerState& opt, std::span<const Clip<float>> clips,
                      const TrainConfig& cfg, int epoch, std::uint64_t step_seed);

/// Per-step JSON-lines record.
std::string log_line(std::int64_t step, int epoch, const StepResult& r);

struct FitOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::ostream* progress = nullptr;
  /// Stop after this many epochs of the current invocation (0: no limit); used to test resumption.
  int stop_after_epochs = 0;
};

struct FitResult {
  std::int64_t steps = 0;
  int epochs_completed = 0;
  LossReport last;
  std::filesystem::path checkpoint;
};

/// Trains on the "train" split. Writes config.json, train_log.jsonl, last.ckpt and final.ckpt under out_dir.
FitResult fit(const data::DatasetManifest& manifest, const TrainConfig& cfg, const FitOptions& opts);

/// Own-frame probabilities at input resolution, one [H, W] map per frame.
std::vector<Tensor<float>> predict_video(const model::Model<float>& model, const data::VideoSample& video);

model::Model<float> model_from_checkpoint(const Checkpoint& ck);

/// Predicts and scores every video of `split`.
metrics::EvalReport evaluate_split(const model::Model<float>& model, const data::DatasetManifest& manifest,
                                   const std::string& split, const metrics::EvalOptions& opts = {});

}  // namespace rvos::train
