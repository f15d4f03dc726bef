#include "rvos/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <random>
#include <sstream>

#include "rvos/errors.hpp"

namespace rvos::data {

namespace fs = std::filesystem;
using nlohmann::json;

Scheme parse_scheme(const std::string& s) {
  if (s == "full") return Scheme::Full;
  if (s == "weak_b") return Scheme::WeakB;
  if (s == "weak_m") return Scheme::WeakM;
  if (s == "weak_mb") return Scheme::WeakMB;
  throw UsageError("unknown scheme '" + s + "' (full|weak_b|weak_m|weak_mb)");
}

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Full: return "full";
    case Scheme::WeakB: return "weak_b";
    case Scheme::WeakM: return "weak_m";
    case Scheme::WeakMB: return "weak_mb";
  }
  return "full";
}

Tensor<float> VideoSample::frames_float() const {
  Tensor<float> out(frames.shape);
  for (std::size_t i = 0; i < frames.size(); ++i) out[i] = static_cast<float>(frames[i]) / 255.0f;
  return out;
}

namespace {

constexpr const char* kColors[] = {"red", "green", "blue", "yellow"};
constexpr std::uint8_t kColorRgb[][3] = {{220, 40, 40}, {40, 190, 60}, {50, 80, 230}, {230, 210, 40}};
constexpr const char* kShapes[] = {"circle", "square", "triangle"};
constexpr int kNumColors = 4;
constexpr int kNumShapes = 3;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : g_(seed) {}
  double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [lo, hi].
  int integer(int lo, int hi) { return lo + static_cast<int>(g_() % static_cast<std::uint64_t>(hi - lo + 1)); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 g_;
};

struct Object {
  int color = 0;
  int shape = 0;
  double r = 0, cx = 0, cy = 0, vx = 0, vy = 0;
};

bool covers(const Object& o, double cx, double cy, double px, double py) {
  const double dx = px - cx, dy = py - cy;
  switch (o.shape) {
    case 0: return dx * dx + dy * dy <= o.r * o.r;
    case 1: return std::abs(dx) <= 0.85 * o.r && std::abs(dy) <= 0.85 * o.r;
    default: {
      // Upward triangle with apex (cx, cy - r) and base y = cy + r.
      if (dy < -o.r || dy > o.r) return false;
      const double half = 0.5 * (dy + o.r);
      return std::abs(dx) <= half;
    }
  }
}

// Centre positions over time, reflecting at the borders.
std::vector<std::pair<double, double>> trajectory(const Object& o, int T, int H, int W) {
  std::vector<std::pair<double, double>> pos;
  double x = o.cx, y = o.cy, vx = o.vx, vy = o.vy;
  for (int t = 0; t < T; ++t) {
    pos.emplace_back(x, y);
    x += vx;
    y += vy;
    if (x < o.r || x > W - o.r) {
      vx = -vx;
      x = std::clamp(x, o.r, W - o.r);
    }
    if (y < o.r || y > H - o.r) {
      vy = -vy;
      y = std::clamp(y, o.r, H - o.r);
    }
  }
  return pos;
}

std::string motion_word(const Object& o) {
  if (std::abs(o.vx) >= std::abs(o.vy)) return o.vx < 0 ? "left" : "right";
  return o.vy < 0 ? "up" : "down";
}

void check_dims(int T, int H, int W) {
  if (T < 1) throw UsageError("number of frames must be >= 1");
  if (H <= 0 || W <= 0 || H % 32 != 0 || W % 32 != 0)
    throw UsageError("invalid dimension " + std::to_string(H) + "x" + std::to_string(W) + ": H and W must be divisible by 32");
}

json box_json(const std::optional<Box>& b) {
  if (!b) return nullptr;
  return json::array({b->x0, b->y0, b->x1, b->y1});
}

std::optional<Box> box_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 4) throw DataError("manifest: malformed box");
  return Box{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"the", "one", "moving"};
    for (auto* c : kColors) v.emplace_back(c);
    for (auto* s : kShapes) v.emplace_back(s);
    for (auto* d : {"left", "right", "up", "down"}) v.emplace_back(d);
    return v;
  }();
  return vocab;
}

std::vector<int> tokenize(const std::string& text) {
  const auto& vocab = vocabulary();
  std::istringstream is(text);
  std::vector<int> ids;
  for (std::string w; is >> w;) {
    auto it = std::find(vocab.begin(), vocab.end(), w);
    if (it == vocab.end()) throw DataError("word '" + w + "' is not in the vocabulary");
    ids.push_back(static_cast<int>(it - vocab.begin()));
  }
  if (ids.empty()) throw DataError("empty expression");
  return ids;
}

std::optional<Box> tight_box(const Mask& m) {
  const int h = m.shape[0], w = m.shape[1];
  Box b{w, h, -1, -1};
  bool any = false;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (m.at(y, x)) {
        any = true;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  if (!any) return std::nullopt;
  return b;
}

VideoSample generate_video(int index, int T, int H, int W, std::uint64_t seed) {
  check_dims(T, H, W);
  Rng rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(index) * 0xbf58476d1ce4e5b9ull + 1);
  const double scale = std::min(H, W) / 64.0;

  const int n_obj = rng.integer(2, 4);
  std::vector<int> pairs(kNumColors * kNumShapes);
  for (int i = 0; i < static_cast<int>(pairs.size()); ++i) pairs[i] = i;
  for (int i = 0; i < n_obj; ++i) std::swap(pairs[i], pairs[rng.integer(i, static_cast<int>(pairs.size()) - 1)]);

  std::vector<Object> objs(n_obj);
  for (int i = 0; i < n_obj; ++i) {
    Object& o = objs[i];
    o.color = pairs[i] / kNumShapes;
    o.shape = pairs[i] % kNumShapes;
    o.r = rng.uniform(0.10, 0.17) * std::min(H, W);
    o.cx = rng.uniform(o.r, W - o.r);
    o.cy = rng.uniform(o.r, H - o.r);
    o.vx = rng.uniform(-3.0, 3.0) * scale;
    o.vy = rng.uniform(-3.0, 3.0) * scale;
  }
  // Object 0 is the referent; it is drawn last so other shapes never hide it.
  const Object& ref = objs[0];

  const int enter = (T > 1 && rng.bernoulli(0.3)) ? rng.integer(1, T - 1) : 0;
  int occluded = -1;
  if (rng.bernoulli(0.2) && enter + 1 <= T - 2) occluded = rng.integer(enter + 1, T - 2);

  std::vector<std::string> templates{std::string("the ") + kColors[ref.color] + " " + kShapes[ref.shape]};
  auto unique = [&](auto key) {
    return std::count_if(objs.begin(), objs.end(), [&](const Object& o) { return key(o) == key(ref); }) == 1;
  };
  if (unique([](const Object& o) { return o.shape; })) templates.push_back(std::string("the ") + kShapes[ref.shape]);
  if (unique([](const Object& o) { return o.color; }))
    templates.push_back(std::string("the ") + kColors[ref.color] + " one");
  std::string text = templates[rng.integer(0, static_cast<int>(templates.size()) - 1)];
  if (rng.bernoulli(0.5)) text += " moving " + motion_word(ref);

  VideoSample s;
  {
    std::ostringstream id;
    id << 'v';
    id.width(4);
    id.fill('0');
    id << index;
    s.id = id.str();
  }
  s.token_text = text;
  s.tokens = tokenize(text);
  s.frames = Tensor<std::uint8_t>({T, 3, H, W});

  const int bg = rng.integer(25, 70);
  std::vector<std::vector<std::pair<double, double>>> paths;
  for (const auto& o : objs) paths.push_back(trajectory(o, T, H, W));

  for (int t = 0; t < T; ++t) {
    Mask mask({H, W});
    std::uint8_t* frame = s.frames.ptr() + static_cast<std::size_t>(t) * 3 * H * W;
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < H * W; ++i) frame[c * H * W + i] = static_cast<std::uint8_t>(bg + rng.integer(-8, 8));
    const bool ref_visible = t >= enter && t != occluded;
    for (int k = n_obj - 1; k >= 0; --k) {
      if (k == 0 && !ref_visible) continue;
      const Object& o = objs[k];
      const auto [cx, cy] = paths[k][t];
      const int y0 = std::max(0, static_cast<int>(cy - o.r) - 1), y1 = std::min(H, static_cast<int>(cy + o.r) + 2);
      const int x0 = std::max(0, static_cast<int>(cx - o.r) - 1), x1 = std::min(W, static_cast<int>(cx + o.r) + 2);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          if (!covers(o, cx, cy, x + 0.5, y + 0.5)) continue;
          for (int c = 0; c < 3; ++c) frame[c * H * W + y * W + x] = kColorRgb[o.color][c];
          if (k == 0) mask.at(y, x) = 1;
        }
    }
    if (t == occluded) {
      // A grey occluder sits over the referent's position.
      const auto [cx, cy] = paths[0][t];
      const int pad = static_cast<int>(ref.r) + 3;
      for (int y = std::max(0, static_cast<int>(cy) - pad); y < std::min(H, static_cast<int>(cy) + pad); ++y)
        for (int x = std::max(0, static_cast<int>(cx) - pad); x < std::min(W, static_cast<int>(cx) + pad); ++x)
          for (int c = 0; c < 3; ++c) frame[c * H * W + y * W + x] = 128;
    }
    s.boxes.push_back(tight_box(mask));
    s.dense_masks.push_back(std::move(mask));
  }
  for (int t = 0; t < T; ++t)
    if (s.boxes[t]) {
      s.first_appearance = t;
      break;
    }
  return s;
}

DatasetManifest generate_dataset(const fs::path& root, int n_videos, int T, int H, int W, std::uint64_t seed,
                                 int n_val) {
  if (n_videos < 1) throw UsageError("number of videos must be >= 1");
  if (n_val < 0) throw UsageError("number of validation videos must be >= 0");
  check_dims(T, H, W);
  DatasetManifest m;
  m.root = root;
  m.generator_seed = seed;
  m.vocabulary = vocabulary();
  for (int i = 0; i < n_videos + n_val; ++i) {
    VideoSample s = generate_video(i, T, H, W, seed);
    VideoRecord r;
    r.id = s.id;
    r.split = i < n_videos ? "train" : "val";
    r.T = T;
    r.H = H;
    r.W = W;
    r.expression = s.token_text;
    r.tokens = s.tokens;
    r.first_appearance = s.first_appearance;
    r.boxes = s.boxes;
    fs::create_directories(root / "frames" / s.id);
    fs::create_directories(root / "masks" / s.id);
    for (int t = 0; t < T; ++t) {
      const std::string frame_rel = "frames/" + s.id + "/" + std::to_string(t) + ".png";
      const std::string mask_rel = "masks/" + s.id + "/" + std::to_string(t) + ".png";
      write_rgb_png(root / frame_rel, s.frames.ptr() + static_cast<std::size_t>(t) * 3 * H * W, H, W);
      write_mask_png(root / mask_rel, s.dense_masks[t]);
      r.frame_paths.push_back(frame_rel);
      r.mask_paths.push_back(mask_rel);
    }
    m.videos.push_back(std::move(r));
  }
  save_manifest(m, root / "manifest.json");
  return m;
}

std::vector<std::size_t> split_indices(const DatasetManifest& manifest, const std::string& split) {
  if (split != "train" && split != "val") throw UsageError("unknown split '" + split + "' (train|val)");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.videos.size(); ++i)
    if (manifest.videos[i].split == split) out.push_back(i);
  return out;
}

WeakAnnotation convert_annotation(const std::vector<std::optional<Box>>& boxes, std::optional<int> first_appearance,
                                  Scheme scheme) {
  WeakAnnotation a;
  a.scheme = scheme;
  std::vector<int> visible;
  for (int t = 0; t < static_cast<int>(boxes.size()); ++t)
    if (boxes[t]) visible.push_back(t);
  if (scheme != Scheme::WeakB && (!first_appearance || visible.empty()))
    throw DataError("no object: the referent never appears, scheme " + to_string(scheme) + " needs a mask frame");
  switch (scheme) {
    case Scheme::Full: a.mask_frames.insert(visible.begin(), visible.end()); break;
    case Scheme::WeakB: a.box_frames.insert(visible.begin(), visible.end()); break;
    case Scheme::WeakM: a.mask_frames.insert(*first_appearance); break;
    case Scheme::WeakMB:
      a.mask_frames.insert(*first_appearance);
      for (int t : visible)
        if (t != *first_appearance) a.box_frames.insert(t);
      break;
  }
  return a;
}

WeakAnnotation convert_annotation(const VideoSample& sample, Scheme scheme) {
  return convert_annotation(sample.boxes, sample.first_appearance, scheme);
}

WeakAnnotation convert_annotation(const VideoRecord& record, Scheme scheme) {
  return convert_annotation(record.boxes, record.first_appearance, scheme);
}

CostReport annotation_cost(const DatasetManifest& manifest, Scheme scheme, double mask_seconds, double box_seconds) {
  if (manifest.videos.empty()) throw DataError("annotation_cost: empty manifest");
  auto cost = [&](Scheme s) {
    double total = 0.0;
    for (const auto& v : manifest.videos) {
      const auto a = convert_annotation(v, s);
      total += static_cast<double>(a.mask_frames.size()) * mask_seconds +
               static_cast<double>(a.box_frames.size()) * box_seconds;
    }
    return total;
  };
  CostReport r;
  r.total_seconds = cost(scheme);
  const double full = cost(Scheme::Full);
  r.speedup_vs_full = r.total_seconds > 0.0 ? full / r.total_seconds : 0.0;
  return r;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json j;
  j["schema_version"] = m.schema_version;
  j["generator_seed"] = m.generator_seed;
  j["vocabulary"] = m.vocabulary;
  json vids = json::array();
  for (const auto& v : m.videos) {
    json jv;
    jv["id"] = v.id;
    jv["T"] = v.T;
    jv["H"] = v.H;
    jv["W"] = v.W;
    jv["expression"] = v.expression;
    jv["tokens"] = v.tokens;
    jv["first_appearance"] = v.first_appearance ? json(*v.first_appearance) : json(nullptr);
    json boxes = json::array();
    for (const auto& b : v.boxes) boxes.push_back(box_json(b));
    jv["boxes"] = boxes;
    jv["frames"] = v.frame_paths;
    jv["masks"] = v.mask_paths;
    jv["split"] = v.split;
    vids.push_back(std::move(jv));
  }
  j["videos"] = std::move(vids);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kSchemaVersion)
      throw DataError("schema version mismatch: manifest has " + std::to_string(m.schema_version) + ", expected " +
                      std::to_string(kSchemaVersion));
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    for (const auto& jv : j.at("videos")) {
      VideoRecord v;
      v.id = jv.at("id").get<std::string>();
      v.T = jv.at("T").get<int>();
      v.H = jv.at("H").get<int>();
      v.W = jv.at("W").get<int>();
      v.expression = jv.at("expression").get<std::string>();
      v.tokens = jv.at("tokens").get<std::vector<int>>();
      if (!jv.at("first_appearance").is_null()) v.first_appearance = jv.at("first_appearance").get<int>();
      for (const auto& b : jv.at("boxes")) v.boxes.push_back(box_from_json(b));
      v.frame_paths = jv.at("frames").get<std::vector<std::string>>();
      v.mask_paths = jv.at("masks").get<std::vector<std::string>>();
      v.split = jv.value("split", std::string("train"));
      if (v.split != "train" && v.split != "val") throw DataError("manifest: video " + v.id + " has unknown split " + v.split);
      if (static_cast<int>(v.boxes.size()) != v.T || static_cast<int>(v.frame_paths.size()) != v.T ||
          static_cast<int>(v.mask_paths.size()) != v.T)
        throw DataError("manifest: video " + v.id + " has inconsistent frame counts");
      for (int tok : v.tokens)
        if (tok < 0 || tok >= m.vocab_size())
          throw DataError("manifest: video " + v.id + " has token id " + std::to_string(tok) + " outside vocabulary");
      for (const auto& rel : v.frame_paths)
        if (!fs::exists(m.root / rel)) throw DataError("missing file: " + (m.root / rel).string());
      for (const auto& rel : v.mask_paths)
        if (!fs::exists(m.root / rel)) throw DataError("missing file: " + (m.root / rel).string());
      m.videos.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + " is malformed: " + e.what());
  }
  return m;
}

VideoSample load_video(const DatasetManifest& m, std::size_t index) {
  const VideoRecord& r = m.videos.at(index);
  VideoSample s;
  s.id = r.id;
  s.tokens = r.tokens;
  s.token_text = r.expression;
  s.boxes = r.boxes;
  s.first_appearance = r.first_appearance;
  s.frames = Tensor<std::uint8_t>({r.T, 3, r.H, r.W});
  const std::size_t per = static_cast<std::size_t>(3) * r.H * r.W;
  for (int t = 0; t < r.T; ++t) {
    auto img = read_rgb_png(m.root / r.frame_paths[t]);
    if (img.shape != Shape{3, r.H, r.W}) throw DataError("frame " + r.frame_paths[t] + " has unexpected size");
    std::copy(img.data.begin(), img.data.end(), s.frames.data.begin() + static_cast<std::ptrdiff_t>(per * t));
    Mask mask = read_mask_png(m.root / r.mask_paths[t]);
    if (mask.shape != Shape{r.H, r.W}) throw DataError("mask " + r.mask_paths[t] + " has unexpected size");
    s.dense_masks.push_back(std::move(mask));
  }
  return s;
}

void write_rgb_png(const fs::path& path, const std::uint8_t* chw, int H, int W) {
  cv::Mat img(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      auto& px = img.at<cv::Vec3b>(y, x);
      // OpenCV stores BGR.
      px[0] = chw[2 * H * W + y * W + x];
      px[1] = chw[1 * H * W + y * W + x];
      px[2] = chw[0 * H * W + y * W + x];
    }
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
}

void write_mask_png(const fs::path& path, const Mask& mask) {
  const int H = mask.shape[0], W = mask.shape[1];
  cv::Mat img(H, W, CV_8UC1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) img.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
}

Mask read_mask_png(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file: " + path.string());
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty() || img.type() != CV_8UC1) throw DataError("mask " + path.string() + " is not an 8-bit single-channel image");
  Mask m({img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      const auto v = img.at<std::uint8_t>(y, x);
      if (v != 0 && v != 255)
        throw DataError("non-binary mask " + path.string() + ": value " + std::to_string(v));
      m.at(y, x) = v ? 1 : 0;
    }
  return m;
}

Tensor<std::uint8_t> read_rgb_png(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file: " + path.string());
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot decode " + path.string());
  const int H = img.rows, W = img.cols;
  Tensor<std::uint8_t> out({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto& px = img.at<cv::Vec3b>(y, x);
      out.at(0, y, x) = px[2];
      out.at(1, y, x) = px[1];
      out.at(2, y, x) = px[0];
    }
  return out;
}

}  // namespace rvos::data
