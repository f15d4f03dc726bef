#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvos/contrast.hpp"
#include "rvos/data.hpp"
#include "rvos/losses.hpp"
#include "rvos/model.hpp"

namespace rvos::train {

enum class ClipSampling {
  ContainAnnotation,  // contiguous window that includes the mask frame when the scheme has one
  Uniform,            // any contiguous window
};

ClipSampling parse_clip_sampling(const std::string& s);
std::string to_string(ClipSampling s);

struct TrainConfig {
  int clip_len = 5;
  int batch_clips = 8;
  double lr = 5e-4;
  double lr_backbone = 2.5e-4;
  int epochs = 30;
  std::vector<int> lr_decay_epochs{15, 25};
  double lr_decay_factor = 0.1;
  double weight_decay = 1e-4;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  data::Scheme scheme = data::Scheme::WeakMB;
  losses::LgcfsMode lgcfs_mode = losses::LgcfsMode::FullNoAvg;
  contrast::BlclConfig blcl;
  losses::LossWeights loss_weights;
  ClipSampling clip_sampling = ClipSampling::ContainAnnotation;
  bool hflip = false;
  int max_steps = 0;               // 0: run all epochs
  int checkpoint_every_epochs = 1;
  /// Architecture; vocab_size is taken from the dataset. use_enhanced defaults to blcl.any_enabled().
  model::ModelConfig model;
  std::optional<bool> use_enhanced;

  void validate() const;
  /// Model configuration for a dataset with `vocab_size` words.
  model::ModelConfig resolved_model(int vocab_size) const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const model::ModelConfig& c);
nlohmann::json to_json(const contrast::BlclConfig& c);
nlohmann::json to_json(const losses::LossWeights& c);
nlohmann::json to_json(const TrainConfig& c);

/// The readers start from the defaults and reject unknown keys and mistyped values (UsageError).
model::ModelConfig model_config_from_json(const nlohmann::json& j, model::ModelConfig base = {});
contrast::BlclConfig blcl_config_from_json(const nlohmann::json& j, contrast::BlclConfig base = {});
losses::LossWeights loss_weights_from_json(const nlohmann::json& j, losses::LossWeights base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const TrainConfig& c, const std::filesystem::path& path);

/// Applies a comma-separated BLCL toggle list ("lv,cc,pseudo", "none" or "").
void apply_blcl_toggles(contrast::BlclConfig& c, const std::string& list);

}  // namespace rvos::train
