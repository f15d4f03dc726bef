#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "rvos/data.hpp"
#include "rvos/errors.hpp"
#include "testing.hpp"

using namespace rvos;
using namespace rvos::data;
using rvos::testing::TempDir;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

VideoRecord record_with(int T, int first, int visible) {
  VideoRecord r;
  r.T = T;
  r.boxes.resize(T);
  for (int t = first; t < first + visible; ++t) r.boxes[t] = Box{0, 0, 4, 4};
  r.first_appearance = first;
  return r;
}

}  // namespace

TEST_CASE("generator is deterministic and seed dependent") {
  const auto a = generate_video(3, 5, 64, 64, 7), b = generate_video(3, 5, 64, 64, 7);
  CHECK(a.frames == b.frames);
  CHECK(a.tokens == b.tokens);
  CHECK(a.boxes == b.boxes);
  const auto c = generate_video(3, 5, 64, 64, 8);
  CHECK(c.frames != a.frames);
  CHECK(generate_video(4, 5, 64, 64, 7).frames != a.frames);
}

TEST_CASE("generated masks, boxes and first appearance agree") {
  for (int i = 0; i < 30; ++i) {
    const auto v = generate_video(i, 6, 64, 96, 0);
    REQUIRE(v.num_frames() == 6);
    CHECK(v.height() == 64);
    CHECK(v.width() == 96);
    CHECK(tokenize(v.token_text) == v.tokens);
    std::optional<int> first;
    for (int t = 0; t < 6; ++t) {
      const auto& m = v.dense_masks[t];
      bool any = false;
      int y0 = 64, y1 = 0, x0 = 96, x1 = 0;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 96; ++x) {
          REQUIRE(m.at(y, x) <= 1);
          if (m.at(y, x)) {
            any = true;
            y0 = std::min(y0, y), y1 = std::max(y1, y + 1), x0 = std::min(x0, x), x1 = std::max(x1, x + 1);
          }
        }
      CHECK(v.boxes[t].has_value() == any);
      if (any) {
        CHECK(*v.boxes[t] == Box{x0, y0, x1, y1});
        if (!first) first = t;
      }
    }
    CHECK(v.first_appearance == first);
  }
}

TEST_CASE("late entry and occlusion rates") {
  int late = 0, occluded = 0;
  const int n = 50, T = 8;
  for (int i = 0; i < n; ++i) {
    const auto v = generate_video(i, T, 64, 64, 0);
    REQUIRE(v.first_appearance.has_value());
    if (*v.first_appearance > 0) ++late;
    for (int t = *v.first_appearance + 1; t < T - 1; ++t)
      if (!v.boxes[t]) {
        ++occluded;
        break;
      }
  }
  CHECK(late >= 0.15 * n);
  CHECK(late <= 0.45 * n);
  CHECK(occluded >= 0.05 * n);
  CHECK(occluded <= 0.40 * n);
}

TEST_CASE("tokenizer and vocabulary") {
  CHECK(tokenize("the red circle").size() == 3);
  CHECK_THROWS_AS(tokenize("the purple dodecahedron"), DataError);
  CHECK_THROWS_AS(tokenize(""), DataError);
  CHECK(parse_scheme("weak_mb") == Scheme::WeakMB);
  CHECK(to_string(Scheme::WeakB) == "weak_b");
  CHECK_THROWS_AS(parse_scheme("weak"), UsageError);
}

TEST_CASE("annotation conversion per scheme") {
  std::vector<std::optional<Box>> boxes(6);
  for (int t : {1, 2, 4, 5}) boxes[t] = Box{1, 1, 3, 3};
  const auto full = convert_annotation(boxes, 1, Scheme::Full);
  CHECK(full.mask_frames == std::set<int>{1, 2, 4, 5});
  CHECK(full.box_frames.empty());
  CHECK(convert_annotation(boxes, 1, Scheme::WeakM).mask_frames == std::set<int>{1});
  const auto mb = convert_annotation(boxes, 1, Scheme::WeakMB);
  CHECK(mb.mask_frames == std::set<int>{1});
  CHECK(mb.box_frames == std::set<int>{2, 4, 5});
  const auto wb = convert_annotation(boxes, 1, Scheme::WeakB);
  CHECK(wb.mask_frames.empty());
  CHECK(wb.box_frames == std::set<int>{1, 2, 4, 5});

  const std::vector<std::optional<Box>> none(4);
  CHECK(convert_annotation(none, std::nullopt, Scheme::WeakB).box_frames.empty());
  for (auto s : {Scheme::Full, Scheme::WeakM, Scheme::WeakMB})
    CHECK(error_of([&] { convert_annotation(none, std::nullopt, s); }).find("no object") != std::string::npos);
}

TEST_CASE("annotation cost arithmetic") {
  // 10 videos, 273 visible frames: 3 with 28 and 7 with 27.
  DatasetManifest m;
  for (int i = 0; i < 10; ++i) m.videos.push_back(record_with(30, 1, i < 3 ? 28 : 27));
  const auto full = annotation_cost(m, Scheme::Full);
  CHECK(full.total_seconds == doctest::Approx(273 * 79.0));
  CHECK(full.speedup_vs_full == doctest::Approx(1.0));
  const auto mb = annotation_cost(m, Scheme::WeakMB);
  CHECK(mb.total_seconds == doctest::Approx(10 * 79.0 + 263 * 7.0));
  CHECK(mb.speedup_vs_full == doctest::Approx(21567.0 / 2631.0).epsilon(1e-12));
  CHECK(mb.speedup_vs_full == doctest::Approx(8.2).epsilon(0.01));
  const auto wb = annotation_cost(m, Scheme::WeakB);
  CHECK(wb.speedup_vs_full == doctest::Approx(79.0 / 7.0).epsilon(1e-12));
  const auto wm = annotation_cost(m, Scheme::WeakM);
  CHECK(wm.speedup_vs_full == doctest::Approx(27.3));
  CHECK_THROWS_AS(annotation_cost(DatasetManifest{}, Scheme::Full), DataError);
}

TEST_CASE("dataset round trip on disk") {
  TempDir dir("data_rt");
  const auto m = generate_dataset(dir.path(), 3, 4, 32, 64, 11, 2);
  const auto loaded = load_manifest(dir / "manifest.json");
  CHECK(loaded == m);
  CHECK(loaded.root == dir.path());
  CHECK(split_indices(loaded, "train") == std::vector<std::size_t>{0, 1, 2});
  CHECK(split_indices(loaded, "val") == std::vector<std::size_t>{3, 4});
  CHECK_THROWS_AS(split_indices(loaded, "test"), UsageError);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto disk = load_video(loaded, i);
    const auto mem = generate_video(static_cast<int>(i), 4, 32, 64, 11);
    CHECK(disk.frames == mem.frames);
    CHECK(disk.dense_masks == mem.dense_masks);
    CHECK(disk.tokens == mem.tokens);
    CHECK(disk.boxes == mem.boxes);
  }
}

TEST_CASE("dataset errors") {
  TempDir dir("data_err");
  CHECK_THROWS_AS(generate_dataset(dir.path(), 1, 2, 48, 64, 0), UsageError);
  CHECK_THROWS_AS(generate_dataset(dir.path(), 1, 0, 32, 32, 0), UsageError);
  CHECK_THROWS_AS(generate_dataset(dir.path(), 0, 2, 32, 32, 0), UsageError);

  const auto m = generate_dataset(dir.path(), 2, 2, 32, 32, 0);
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json original;
  std::ifstream(manifest_path) >> original;
  auto rewrite = [&](const nlohmann::json& j) { std::ofstream(manifest_path) << j.dump(); };

  SUBCASE("missing manifest") {
    CHECK(error_of([&] { load_manifest(dir / "nope.json"); }).find("missing file") != std::string::npos);
  }
  SUBCASE("schema version") {
    auto j = original;
    j["schema_version"] = 99;
    rewrite(j);
    CHECK(error_of([&] { load_manifest(manifest_path); }).find("schema version mismatch") != std::string::npos);
  }
  SUBCASE("token outside vocabulary") {
    auto j = original;
    j["videos"][0]["tokens"][0] = 100000;
    rewrite(j);
    CHECK_THROWS_AS(load_manifest(manifest_path), DataError);
  }
  SUBCASE("unknown split") {
    auto j = original;
    j["videos"][0]["split"] = "test";
    rewrite(j);
    CHECK_THROWS_AS(load_manifest(manifest_path), DataError);
  }
  SUBCASE("missing frame") {
    const auto path = dir / m.videos[1].frame_paths[1];
    std::filesystem::remove(path);
    const auto msg = error_of([&] { load_manifest(manifest_path); });
    CHECK(msg.find("missing file") != std::string::npos);
    CHECK(msg.find(m.videos[1].frame_paths[1]) != std::string::npos);
  }
  SUBCASE("non-binary mask") {
    Mask bad({32, 32});
    write_mask_png(dir / "bad.png", bad);
    CHECK(read_mask_png(dir / "bad.png") == bad);
    cv::Mat gray(32, 32, CV_8UC1, cv::Scalar(128));
    cv::imwrite((dir / "gray.png").string(), gray);
    CHECK(error_of([&] { read_mask_png(dir / "gray.png"); }).find("non-binary") != std::string::npos);
    std::vector<std::uint8_t> rgb(3 * 32 * 32, 255);
    write_rgb_png(dir / "rgb.png", rgb.data(), 32, 32);
    CHECK_THROWS_AS(read_mask_png(dir / "rgb.png"), DataError);
  }
  SUBCASE("malformed json") {
    std::ofstream(manifest_path) << "{";
    CHECK_THROWS_AS(load_manifest(manifest_path), DataError);
  }
}
