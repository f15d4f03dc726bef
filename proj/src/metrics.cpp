#include "rvos/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>

namespace rvos::metrics {

namespace {

void same_shape(const Mask& a, const Mask& b, const char* what) {
  if (a.shape != b.shape) throw ShapeError(std::string(what) + ": mask shapes differ");
}

std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; }));
}

Mask dilate_disk(const Mask& m, int radius) {
  const int h = m.shape[0], w = m.shape[1];
  Mask out({h, w});
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) offsets.emplace_back(dy, dx);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      for (auto [dy, dx] : offsets) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < h && xx >= 0 && xx < w) out.at(yy, xx) = 1;
      }
    }
  return out;
}

std::string threshold_key(double t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", t);
  return buf;
}

}  // namespace

double iou(const Mask& pred, const Mask& gt) {
  same_shape(pred, gt, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Mask boundary_map(const Mask& m) {
  const int h = m.shape[0], w = m.shape[1];
  Mask b({h, w});
  auto fg = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && m.at(y, x) != 0; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) b.at(y, x) = 1;
  return b;
}

double boundary_f(const Mask& pred, const Mask& gt, double tol_fraction) {
  same_shape(pred, gt, "boundary_f");
  const Mask bp = boundary_map(pred), bg = boundary_map(gt);
  const std::size_t np = count(bp), ng = count(bg);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const int h = pred.shape[0], w = pred.shape[1];
  const int radius = static_cast<int>(std::ceil(tol_fraction * std::sqrt(static_cast<double>(h) * h + w * w)));
  const Mask dp = dilate_disk(bp, radius), dg = dilate_disk(bg, radius);
  std::size_t hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    hit_p += bp[i] && dg[i];
    hit_g += bg[i] && dp[i];
  }
  const double precision = static_cast<double>(hit_p) / static_cast<double>(np);
  const double recall = static_cast<double>(hit_g) / static_cast<double>(ng);
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

double precision_at(std::span<const double> ious, double threshold, bool inclusive) {
  if (ious.empty()) return 0.0;
  const auto n = std::count_if(ious.begin(), ious.end(),
                               [&](double v) { return inclusive ? v >= threshold : v > threshold; });
  return static_cast<double>(n) / static_cast<double>(ious.size());
}

double mean_ap(std::span<const double> ious, bool inclusive) {
  double acc = 0.0;
  for (int i = 0; i < 10; ++i) acc += precision_at(ious, 0.5 + 0.05 * i, inclusive);
  return acc / 10.0;
}

Mask binarize(const Tensor<float>& probs, double threshold) {
  Mask m(probs.shape);
  for (std::size_t i = 0; i < probs.size(); ++i) m[i] = probs[i] > threshold ? 1 : 0;
  return m;
}

EvalReport evaluate(std::span<const VideoPrediction> predictions, const std::vector<std::vector<Mask>>& gt,
                    const EvalOptions& opts) {
  if (predictions.size() != gt.size()) throw DataError("evaluate: prediction / ground-truth video count mismatch");
  EvalReport r;
  std::vector<double> frame_ious;
  double j_sum = 0.0, f_sum = 0.0;
  int scored_videos = 0;
  for (std::size_t v = 0; v < predictions.size(); ++v) {
    const auto& pv = predictions[v];
    if (pv.probs.size() != gt[v].size()) throw DataError("evaluate: frame count mismatch for video " + pv.id);
    double vj = 0.0, vf = 0.0;
    int visible = 0;
    for (std::size_t t = 0; t < pv.probs.size(); ++t) {
      const Mask pred = binarize(pv.probs[t], opts.binarize_threshold);
      const Mask& g = gt[v][t];
      if (count(g) == 0) {
        r.empty_frame_false_positive_pixels += static_cast<long long>(count(pred));
        continue;
      }
      const double j = iou(pred, g);
      vj += j;
      vf += boundary_f(pred, g, opts.tol_fraction);
      frame_ious.push_back(j);
      ++visible;
    }
    if (visible == 0) continue;
    VideoScore s{pv.id, vj / visible, vf / visible};
    j_sum += s.J;
    f_sum += s.F;
    ++scored_videos;
    r.per_video.push_back(s);
  }
  if (scored_videos > 0) {
    r.J_mean = j_sum / scored_videos;
    r.F_mean = f_sum / scored_videos;
  }
  r.JF_mean = (r.J_mean + r.F_mean) / 2.0;
  for (int i = 0; i < 5; ++i) {
    const double t = 0.5 + 0.1 * i;
    r.precision_at[threshold_key(t)] = precision_at(frame_ious, t, opts.inclusive_precision);
  }
  r.map_50_95 = mean_ap(frame_ious, opts.inclusive_precision);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["J_mean"] = r.J_mean;
  j["F_mean"] = r.F_mean;
  j["JF_mean"] = r.JF_mean;
  j["precision_at"] = r.precision_at;
  j["map_50_95"] = r.map_50_95;
  nlohmann::json pv = nlohmann::json::array();
  for (const auto& v : r.per_video) pv.push_back({{"id", v.id}, {"J", v.J}, {"F", v.F}});
  j["per_video"] = pv;
  j["diagnostics"] = {{"empty_frame_false_positive_pixels", r.empty_frame_false_positive_pixels}};
  return j.dump(2) + "\n";
}

}  // namespace rvos::metrics
