#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rvos/box.hpp"
#include "rvos/tensor.hpp"

namespace rvos::data {

inline constexpr int kSchemaVersion = 1;

using Mask = Tensor<std::uint8_t>;  // [H, W], values {0, 1}

enum class Scheme { Full, WeakB, WeakM, WeakMB };

Scheme parse_scheme(const std::string& s);
std::string to_string(Scheme s);

struct VideoSample {
  std::string id;
  Tensor<std::uint8_t> frames;  // [T, 3, H, W], 8-bit RGB
  std::vector<int> tokens;
  std::string token_text;
  std::vector<Mask> dense_masks;         // T entries
  std::vector<std::optional<Box>> boxes;  // tight box of each nonempty mask, pixel units
  std::optional<int> first_appearance;

  int num_frames() const { return frames.shape.empty() ? 0 : frames.shape[0]; }
  int height() const { return frames.shape.at(2); }
  int width() const { return frames.shape.at(3); }
  /// Frames as reals in [0, 1].
  Tensor<float> frames_float() const;
};

struct WeakAnnotation {
  Scheme scheme = Scheme::Full;
  std::set<int> mask_frames;
  std::set<int> box_frames;
};

struct VideoRecord {
  std::string id;
  int T = 0, H = 0, W = 0;
  std::string expression;
  std::vector<int> tokens;
  std::optional<int> first_appearance;
  std::vector<std::optional<Box>> boxes;
  std::vector<std::string> frame_paths;  // relative to the dataset root
  std::vector<std::string> mask_paths;
  std::string split = "train";  // "train" or "val"
  bool operator==(const VideoRecord&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  int schema_version = kSchemaVersion;
  std::uint64_t generator_seed = 0;
  std::vector<std::string> vocabulary;
  std::vector<VideoRecord> videos;

  int vocab_size() const { return static_cast<int>(vocabulary.size()); }
  /// Equality ignores the root path.
  bool operator==(const DatasetManifest& o) const {
    return schema_version == o.schema_version && generator_seed == o.generator_seed && vocabulary == o.vocabulary &&
           videos == o.videos;
  }
};

struct CostReport {
  double total_seconds = 0.0;
  double speedup_vs_full = 1.0;
};

/// Closed vocabulary used by the expression templates.
const std::vector<std::string>& vocabulary();
/// Whitespace tokenizer over vocabulary(); unknown words are a data error.
std::vector<int> tokenize(const std::string& text);

/// Tight half-open box of a mask, or nullopt when it is empty.
std::optional<Box> tight_box(const Mask& m);

/// Synthesizes video `index` of a dataset seeded by `seed`, entirely in memory.
VideoSample generate_video(int index, int T, int H, int W, std::uint64_t seed);

/// Writes `n_videos` synthetic videos under `root` and returns the saved manifest.
/// `n_val` further videos (continuing the same index stream) are tagged with the "val" split.
DatasetManifest generate_dataset(const std::filesystem::path& root, int n_videos, int T, int H, int W,
                                 std::uint64_t seed, int n_val = 0);

/// Indices of the videos belonging to `split`.
std::vector<std::size_t> split_indices(const DatasetManifest& manifest, const std::string& split);

WeakAnnotation convert_annotation(const std::vector<std::optional<Box>>& boxes,
                                  std::optional<int> first_appearance, Scheme scheme);
WeakAnnotation convert_annotation(const VideoSample& sample, Scheme scheme);
WeakAnnotation convert_annotation(const VideoRecord& record, Scheme scheme);

CostReport annotation_cost(const DatasetManifest& manifest, Scheme scheme, double mask_seconds = 79.0,
                           double box_seconds = 7.0);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
/// Loads and validates a manifest; `root` becomes the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Reads one video's frames and masks from disk.
VideoSample load_video(const DatasetManifest& manifest, std::size_t index);

void write_rgb_png(const std::filesystem::path& path, const std::uint8_t* chw, int H, int W);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
/// Reads a {0,255} mask; any other value is a data error.
Mask read_mask_png(const std::filesystem::path& path);
/// Reads an RGB image into [3, H, W].
Tensor<std::uint8_t> read_rgb_png(const std::filesystem::path& path);

}  // namespace rvos::data
