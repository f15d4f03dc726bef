#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rvos/config.hpp"
#include "rvos/model.hpp"

namespace rvos::train {

inline constexpr int kCheckpointVersion = 1;

/// First and second moment estimates of the adaptive-moment optimizer.
struct OptimizerState {
  std::int64_t step = 0;
  model::ParamMap<float> m;
  model::ParamMap<float> v;
  bool operator==(const OptimizerState&) const = default;
};

struct Checkpoint {
  model::ModelConfig model;
  model::ParamMap<float> params;
  std::vector<std::string> vocabulary;
  std::string rng_state;  // std::mt19937_64 stream state
  std::optional<TrainConfig> train_config;
  std::optional<OptimizerState> optimizer;
  int epochs_completed = 0;
  std::int64_t step = 0;
};

/// CBOR map with float tensors stored as little-endian float32 byte strings.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Written to a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// DataError unless the checkpoint was trained on the same vocabulary.
void check_vocabulary(const Checkpoint& ck, const std::vector<std::string>& vocabulary);

}  // namespace rvos::train
