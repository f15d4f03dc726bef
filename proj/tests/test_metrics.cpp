#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

#include "rvos/metrics.hpp"
#include "testing.hpp"

using namespace rvos;
using metrics::Mask;

namespace {

Mask from_bits(int bits, int h = 3, int w = 3) {
  Mask m({h, w});
  for (int i = 0; i < h * w; ++i) m[i] = (bits >> i) & 1;
  return m;
}

using Cell = std::pair<int, int>;

std::set<Cell> cells(const Mask& m) {
  std::set<Cell> s;
  for (int y = 0; y < m.shape[0]; ++y)
    for (int x = 0; x < m.shape[1]; ++x)
      if (m.at(y, x)) s.insert({y, x});
  return s;
}

double iou_oracle(const Mask& a, const Mask& b) {
  const auto A = cells(a), B = cells(b);
  std::set<Cell> inter, uni = A;
  for (const auto& c : B) {
    if (A.count(c)) inter.insert(c);
    uni.insert(c);
  }
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

// Literal definition: boundary cells have a 4-neighbour outside the set (or off-image);
// a boundary cell matches if some boundary cell of the other mask lies within the disk radius.
double boundary_oracle(const Mask& a, const Mask& b, double tol) {
  const int h = a.shape[0], w = a.shape[1];
  auto boundary = [&](const Mask& m) {
    const auto S = cells(m);
    std::set<Cell> out;
    for (const auto& [y, x] : S)
      for (auto [dy, dx] : {Cell{-1, 0}, Cell{1, 0}, Cell{0, -1}, Cell{0, 1}})
        if (!S.count({y + dy, x + dx})) out.insert({y, x});
    return out;
  };
  const auto Ba = boundary(a), Bb = boundary(b);
  if (Ba.empty() && Bb.empty()) return 1.0;
  if (Ba.empty() || Bb.empty()) return 0.0;
  const double r = std::ceil(tol * std::sqrt(static_cast<double>(h * h + w * w)));
  auto matched = [&](const std::set<Cell>& from, const std::set<Cell>& to) {
    int n = 0;
    for (const auto& [y, x] : from)
      for (const auto& [yy, xx] : to)
        if ((y - yy) * (y - yy) + (x - xx) * (x - xx) <= r * r) {
          ++n;
          break;
        }
    return static_cast<double>(n) / static_cast<double>(from.size());
  };
  const double p = matched(Ba, Bb), rc = matched(Bb, Ba);
  return p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
}

Mask square(int size, int x0, int y0, int side) {
  Mask m({size, size});
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  return m;
}

}  // namespace

TEST_CASE("iou and boundary F match set oracles on every 3x3 pair") {
  int mismatches = 0;
  for (int a = 0; a < 512; ++a) {
    const Mask ma = from_bits(a);
    for (int b = 0; b < 512; ++b) {
      const Mask mb = from_bits(b);
      if (metrics::iou(ma, mb) != iou_oracle(ma, mb)) ++mismatches;
      if (std::abs(metrics::boundary_f(ma, mb) - boundary_oracle(ma, mb, 0.008)) > 1e-12) ++mismatches;
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("boundary F with a wider tolerance matches the oracle") {
  std::mt19937_64 rng(3);
  for (int s = 0; s < 200; ++s) {
    std::bernoulli_distribution b(0.5);
    Mask x({8, 8}), y({8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = b(rng);
      y[i] = b(rng);
    }
    for (double tol : {0.008, 0.1, 0.2})
      CHECK(metrics::boundary_f(x, y, tol) == doctest::Approx(boundary_oracle(x, y, tol)).epsilon(1e-12));
  }
}

TEST_CASE("trivial metric values") {
  const Mask a = square(16, 2, 2, 6), b = square(16, 9, 9, 5), empty({16, 16});
  CHECK(metrics::iou(a, a) == 1.0);
  CHECK(metrics::iou(a, b) == 0.0);
  CHECK(metrics::iou(empty, empty) == 1.0);
  CHECK(metrics::boundary_f(a, a) == 1.0);
  CHECK(metrics::boundary_f(empty, a) == 0.0);
  CHECK(metrics::boundary_f(empty, empty) == 1.0);
}

TEST_CASE("one-pixel shift is within the boundary tolerance") {
  const Mask gt = square(64, 20, 20, 16), pred = square(64, 21, 20, 16);
  REQUIRE(std::ceil(0.008 * std::sqrt(2.0 * 64 * 64)) >= 1);
  CHECK(metrics::boundary_f(pred, gt) == 1.0);
  CHECK(metrics::iou(pred, gt) < 1.0);
}

TEST_CASE("precision and mAP") {
  const std::vector<double> same{0.6, 0.6, 0.6};
  CHECK(metrics::precision_at(same, 0.5) == 1.0);
  CHECK(metrics::precision_at(same, 0.7) == 0.0);
  const std::vector<double> ones{1.0, 1.0};
  CHECK(metrics::mean_ap(ones) == 1.0);
  // Counts above 0.50, 0.55, ..., 0.95: 3, 2, 2, 2, 2, 1, 1, 1, 1, 0.
  const std::vector<double> mixed{0.52, 0.71, 0.93};
  CHECK(metrics::mean_ap(mixed) == doctest::Approx(15.0 / 30.0).epsilon(1e-12));
  const std::vector<double> tie{0.5, 0.7};
  CHECK(metrics::precision_at(tie, 0.5) == 0.5);
  CHECK(metrics::precision_at(tie, 0.5, true) == 1.0);
  CHECK(metrics::precision_at(std::vector<double>{}, 0.5) == 0.0);
}

TEST_CASE("metric properties on random masks") {
  std::mt19937_64 rng(5);
  for (int s = 0; s < 100; ++s) {
    std::bernoulli_distribution b(0.1 + 0.008 * s);
    Mask x({12, 12}), y({12, 12});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = b(rng);
      y[i] = b(rng);
    }
    const double j = metrics::iou(x, y), f = metrics::boundary_f(x, y);
    CHECK(j == metrics::iou(y, x));
    CHECK(f == metrics::boundary_f(y, x));
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  std::vector<double> ious(40);
  for (auto& v : ious) v = std::uniform_real_distribution<double>(0, 1)(rng);
  double prev = 2.0;
  for (int i = 0; i <= 20; ++i) {
    const double p = metrics::precision_at(ious, i * 0.05);
    CHECK(p <= prev);
    prev = p;
  }
}

TEST_CASE("evaluate aggregates visible frames per video") {
  const Mask gt1 = square(16, 2, 2, 6), gt2 = square(16, 4, 4, 8), empty({16, 16});
  auto probs_of = [](const Mask& m) {
    Tensor<float> p(m.shape);
    for (std::size_t i = 0; i < m.size(); ++i) p[i] = m[i] ? 0.9f : 0.1f;
    return p;
  };
  SUBCASE("single frame identity") {
    const Mask pred = square(16, 3, 2, 6);
    std::vector<metrics::VideoPrediction> preds{{"a", {probs_of(pred)}}};
    const auto r = metrics::evaluate(preds, {{gt1}});
    CHECK(r.J_mean == metrics::iou(pred, gt1));
    CHECK(r.F_mean == metrics::boundary_f(pred, gt1));
    CHECK(r.JF_mean == doctest::Approx((r.J_mean + r.F_mean) / 2));
  }
  SUBCASE("empty ground-truth frames are excluded but logged") {
    Mask fp = empty;
    fp.at(0, 0) = fp.at(0, 1) = 1;
    std::vector<metrics::VideoPrediction> preds{{"a", {probs_of(gt1), probs_of(fp)}}, {"b", {probs_of(empty)}},
                                                {"c", {probs_of(gt1)}}};
    const auto r = metrics::evaluate(preds, {{gt1, empty}, {empty}, {gt2}});
    CHECK(r.per_video.size() == 2);  // "b" never shows the object
    CHECK(r.empty_frame_false_positive_pixels == 2);
    CHECK(r.J_mean == doctest::Approx((1.0 + metrics::iou(gt1, gt2)) / 2));
    CHECK(r.precision_at.at("0.5") == doctest::Approx(0.5));
  }
  SUBCASE("mismatched inputs") {
    std::vector<metrics::VideoPrediction> preds{{"a", {probs_of(gt1)}}};
    CHECK_THROWS_AS(metrics::evaluate(preds, {}), DataError);
    CHECK_THROWS_AS(metrics::evaluate(preds, {{gt1, gt1}}), DataError);
  }
}

TEST_CASE("report JSON field names") {
  metrics::EvalReport r;
  r.J_mean = 0.5;
  r.precision_at["0.5"] = 1.0;
  r.per_video.push_back({"v0000", 0.5, 0.25});
  const auto j = nlohmann::json::parse(metrics::report_to_json(r));
  for (const char* k : {"J_mean", "F_mean", "JF_mean", "precision_at", "map_50_95", "per_video"})
    CHECK(j.contains(k));
  CHECK(j.at("per_video")[0].at("id") == "v0000");
}

TEST_CASE("binarize uses a strict threshold") {
  Tensor<float> p({3}, std::vector<float>{0.5f, 0.51f, 0.2f});
  const auto m = metrics::binarize(p, 0.5);
  CHECK(m.data == std::vector<std::uint8_t>{0, 1, 0});
}
