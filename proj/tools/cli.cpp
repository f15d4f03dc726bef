#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "rvos/train.hpp"

namespace rvos::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Data: return "data";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Shape: return "data";
  }
  return "data";
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return 2;
    case ErrorKind::Numeric: return 4;
    default: return 3;
  }
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("no x");
    std::size_t a = 0, b = 0;
    const int h = std::stoi(s.substr(0, x), &a);
    const int w = std::stoi(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1) throw std::invalid_argument("trailing");
    return {h, w};
  } catch (const std::exception&) {
    throw UsageError("--size must look like HxW, got '" + s + "'");
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("RVOS_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const auto s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw UsageError(std::string("RVOS_SEED is not an unsigned integer: ") + v);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

data::DatasetManifest load_dataset(const fs::path& dir) { return data::load_manifest(dir / "manifest.json"); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

struct TrainArgs {
  std::string data, config, out, scheme, lgcfs, blcl, resume;
  bool blcl_set = false;
  int max_steps = -1, epochs = -1;
  bool verbose = false;
};

train::TrainConfig resolve_config(const TrainArgs& a) {
  train::TrainConfig cfg = a.config.empty() ? train::TrainConfig{} : train::load_train_config(a.config);
  if (!a.scheme.empty()) cfg.scheme = data::parse_scheme(a.scheme);
  if (!a.lgcfs.empty()) cfg.lgcfs_mode = losses::parse_lgcfs_mode(a.lgcfs);
  if (a.blcl_set) train::apply_blcl_toggles(cfg.blcl, a.blcl);
  if (a.max_steps >= 0) cfg.max_steps = a.max_steps;
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (auto s = env_seed()) cfg.seed = *s;
  cfg.validate();
  return cfg;
}

int cmd_gen(const std::string& out_dir, int videos, int val, int frames, const std::string& size, std::uint64_t seed,
            std::ostream& out) {
  const auto [h, w] = parse_size(size);
  const auto m = data::generate_dataset(out_dir, videos, frames, h, w, seed, val);
  out << json{{"root", out_dir}, {"videos", m.videos.size()}, {"vocabulary", m.vocab_size()}}.dump() << "\n";
  return 0;
}

int cmd_convert(const std::string& data_dir, const std::string& scheme_s, const std::string& out_dir,
                std::ostream& out) {
  const auto scheme = data::parse_scheme(scheme_s);
  const auto m = load_dataset(data_dir);
  json vids = json::array();
  for (const auto& v : m.videos) {
    const auto a = data::convert_annotation(v, scheme);
    vids.push_back({{"id", v.id}, {"mask_frames", a.mask_frames}, {"box_frames", a.box_frames}});
  }
  const json doc{{"scheme", data::to_string(scheme)}, {"dataset", fs::absolute(data_dir).string()}, {"videos", vids}};
  const fs::path path = fs::path(out_dir) / "supervision.json";
  write_text(path, doc.dump(2) + "\n");
  out << path.string() << "\n";
  return 0;
}

int cmd_cost(const std::string& data_dir, const std::string& scheme_s, double mask_s, double box_s,
             std::ostream& out) {
  const auto scheme = data::parse_scheme(scheme_s);
  const auto m = load_dataset(data_dir);
  const auto r = data::annotation_cost(m, scheme, mask_s, box_s);
  long visible = 0;
  for (const auto& v : m.videos)
    visible += std::count_if(v.boxes.begin(), v.boxes.end(), [](const auto& b) { return b.has_value(); });
  out << json{{"scheme", data::to_string(scheme)},
              {"total_seconds", r.total_seconds},
              {"speedup_vs_full", r.speedup_vs_full},
              {"videos", m.videos.size()},
              {"mean_visible_frames", static_cast<double>(visible) / static_cast<double>(m.videos.size())}}
             .dump()
      << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(a);
  const auto m = load_dataset(a.data);
  train::FitOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = a.resume;
  if (a.verbose) opts.progress = &err;
  const auto r = train::fit(m, cfg, opts);
  out << json{{"checkpoint", r.checkpoint.string()}, {"steps", r.steps}, {"epochs", r.epochs_completed},
              {"final_loss", r.last.total}}
             .dump()
      << "\n";
  return 0;
}

void write_mask_images(const fs::path& dir, const train::Checkpoint& ck, const data::DatasetManifest& m,
                       const std::string& split, double threshold) {
  const auto model = train::model_from_checkpoint(ck);
  for (auto i : data::split_indices(m, split)) {
    const auto v = data::load_video(m, i);
    const auto probs = train::predict_video(model, v);
    fs::create_directories(dir / v.id);
    for (std::size_t t = 0; t < probs.size(); ++t)
      data::write_mask_png(dir / v.id / (std::to_string(t) + ".png"), metrics::binarize(probs[t], threshold));
  }
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& out_path,
             const std::string& split, const metrics::EvalOptions& opts, const std::string& masks_dir,
             std::ostream& out) {
  const auto m = load_dataset(data_dir);
  const auto ck = train::load_checkpoint(ckpt);
  train::check_vocabulary(ck, m.vocabulary);
  const auto report = train::evaluate_split(train::model_from_checkpoint(ck), m, split, opts);
  write_text(out_path, metrics::report_to_json(report));
  if (!masks_dir.empty()) write_mask_images(masks_dir, ck, m, split, opts.binarize_threshold);
  out << json{{"J_mean", report.J_mean}, {"F_mean", report.F_mean}, {"JF_mean", report.JF_mean}}.dump() << "\n";
  return 0;
}

struct Cell {
  std::string scheme, lgcfs, blcl;
  double d_th = 0.9;
  std::uint64_t seed = 0;
  std::string group() const {
    return scheme + "_" + lgcfs + "_" + (blcl.empty() ? "none" : blcl) + "_dth" + fmt(d_th, 2);
  }
  std::string name() const {
    std::string g = group() + "_seed" + std::to_string(seed);
    std::replace(g.begin(), g.end(), ',', '-');
    return g;
  }
};

template <typename T>
std::vector<T> grid_list(const json& grid, const char* key, std::vector<T> fallback) {
  if (!grid.contains(key)) return fallback;
  try {
    auto v = grid.at(key).get<std::vector<T>>();
    if (v.empty()) throw UsageError(std::string("grid: '") + key + "' is empty");
    return v;
  } catch (const json::exception& e) {
    throw UsageError(std::string("grid.") + key + ": " + e.what());
  }
}

int cmd_ablate(const std::string& data_dir, const std::string& grid_path, const std::string& out_dir,
               bool verbose, std::ostream& out, std::ostream& err) {
  json grid;
  {
    std::ifstream is(grid_path);
    if (!is) throw UsageError("cannot open grid file " + grid_path);
    try {
      grid = json::parse(is);
    } catch (const json::exception& e) {
      throw UsageError("grid file: " + std::string(e.what()));
    }
  }
  if (!grid.is_object()) throw UsageError("grid: expected a JSON object");
  for (const auto& [k, v] : grid.items())
    if (k != "base" && k != "schemes" && k != "lgcfs_modes" && k != "blcl" && k != "d_th" && k != "seeds" &&
        k != "split")
      throw UsageError("grid: unknown field '" + k + "'");
  const train::TrainConfig base =
      grid.contains("base") ? train::train_config_from_json(grid.at("base")) : train::TrainConfig{};
  const auto schemes = grid_list<std::string>(grid, "schemes", {data::to_string(base.scheme)});
  const auto modes = grid_list<std::string>(grid, "lgcfs_modes", {losses::to_string(base.lgcfs_mode)});
  const auto blcls = grid_list<std::string>(grid, "blcl", {"lv,cc,pseudo"});
  const auto dths = grid_list<double>(grid, "d_th", {base.blcl.d_th});
  auto seeds = grid_list<std::uint64_t>(grid, "seeds", {base.seed});
  if (auto s = env_seed()) seeds = {*s};
  const std::string split = grid.value("split", std::string("val"));

  const auto m = load_dataset(data_dir);
  std::vector<Cell> cells;
  for (const auto& s : schemes)
    for (const auto& l : modes)
      for (const auto& b : blcls)
        for (double d : dths)
          for (auto seed : seeds) cells.push_back({s, l, b == "none" ? "" : b, d, seed});

  struct Agg {
    Cell cell;
    std::vector<double> J, F;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> groups;
  json cell_docs = json::array();
  for (const auto& c : cells) {
    train::TrainConfig cfg = base;
    cfg.scheme = data::parse_scheme(c.scheme);
    cfg.lgcfs_mode = losses::parse_lgcfs_mode(c.lgcfs);
    train::apply_blcl_toggles(cfg.blcl, c.blcl);
    cfg.blcl.d_th = c.d_th;
    cfg.seed = c.seed;
    cfg.validate();
    const fs::path dir = fs::path(out_dir) / "cells" / c.name();
    const fs::path report_path = dir / "report.json";
    const std::string cfg_text = train::to_json(cfg).dump(2) + "\n";
    bool cached = false;
    if (fs::exists(report_path) && fs::exists(dir / "config.json")) {
      std::ifstream is(dir / "config.json");
      std::stringstream ss;
      ss << is.rdbuf();
      cached = ss.str() == cfg_text;
    }
    if (!cached) {
      if (verbose) err << "ablate: training " << c.name() << std::endl;
      train::FitOptions opts;
      opts.out_dir = dir;
      const auto r = train::fit(m, cfg, opts);
      const auto ck = train::load_checkpoint(r.checkpoint);
      const auto report = train::evaluate_split(train::model_from_checkpoint(ck), m, split);
      write_text(report_path, metrics::report_to_json(report));
    }
    std::ifstream is(report_path);
    const json rep = json::parse(is);
    json first_step;
    {
      std::ifstream log(dir / "train_log.jsonl");
      std::string line;
      if (std::getline(log, line) && !line.empty()) first_step = json::parse(line);
    }
    const double J = rep.at("J_mean").get<double>(), F = rep.at("F_mean").get<double>();
    cell_docs.push_back({{"name", c.name()}, {"scheme", c.scheme}, {"lgcfs_mode", c.lgcfs}, {"blcl", c.blcl},
                         {"d_th", c.d_th}, {"seed", c.seed}, {"J_mean", J}, {"F_mean", F},
                         {"JF_mean", rep.at("JF_mean")}, {"report", report_path.string()},
                         {"first_step", first_step}});
    auto [it, fresh] = groups.try_emplace(c.group(), Agg{c, {}, {}});
    if (fresh) order.push_back(c.group());
    it->second.J.push_back(J);
    it->second.F.push_back(F);
  }

  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  auto mark = [](const std::string& list, const char* item) {
    std::istringstream is(list);
    for (std::string t; std::getline(is, t, ',');)
      if (t == item) return "x";
    return " ";
  };
  std::ostringstream table;
  table << "| scheme | LGCFS | LV | CC | Pseudo | d_th | seeds | J | F | J&F |\n";
  table << "|---|---|---|---|---|---|---|---|---|---|\n";
  json rows = json::array();
  for (const auto& g : order) {
    const auto& a = groups.at(g);
    const double J = mean(a.J), F = mean(a.F);
    table << "| " << a.cell.scheme << " | " << a.cell.lgcfs << " | " << mark(a.cell.blcl, "lv") << " | "
          << mark(a.cell.blcl, "cc") << " | " << mark(a.cell.blcl, "pseudo") << " | " << fmt(a.cell.d_th, 2)
          << " | " << a.J.size() << " | " << fmt(J) << " | " << fmt(F) << " | " << fmt((J + F) / 2) << " |\n";
    rows.push_back({{"scheme", a.cell.scheme}, {"lgcfs_mode", a.cell.lgcfs}, {"blcl", a.cell.blcl},
                    {"d_th", a.cell.d_th}, {"J_per_seed", a.J}, {"F_per_seed", a.F}, {"J_mean", J},
                    {"F_mean", F}, {"JF_mean", (J + F) / 2}});
  }
  write_text(fs::path(out_dir) / "summary.md", table.str());
  write_text(fs::path(out_dir) / "summary.json",
             json{{"split", split}, {"rows", rows}, {"cells", cell_docs}}.dump(2) + "\n");
  out << table.str();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weakly supervised referring video object segmentation on synthetic clips", "rvos"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  std::string gen_out, gen_size = "64x64";
  int gen_videos = 200, gen_val = 0, gen_frames = 5;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--videos", gen_videos, "Number of training videos");
  gen->add_option("--val", gen_val, "Number of additional validation videos");
  gen->add_option("--frames", gen_frames, "Frames per video");
  gen->add_option("--size", gen_size, "Frame size HxW (multiples of 32)");
  gen->add_option("--seed", gen_seed, "Generator seed");

  auto* conv = app.add_subcommand("convert", "Write the supervision overlay of a scheme");
  std::string conv_data, conv_scheme, conv_out;
  conv->add_option("--data", conv_data, "Dataset directory")->required();
  conv->add_option("--scheme", conv_scheme, "full|weak_b|weak_m|weak_mb")->required();
  conv->add_option("--out", conv_out, "Output directory for supervision.json")->required();

  auto* cost = app.add_subcommand("cost", "Annotation-time cost of a scheme");
  std::string cost_data, cost_scheme;
  double mask_s = 79.0, box_s = 7.0;
  cost->add_option("--data", cost_data, "Dataset directory")->required();
  cost->add_option("--scheme", cost_scheme, "full|weak_b|weak_m|weak_mb")->required();
  cost->add_option("--mask-seconds", mask_s, "Seconds per dense mask");
  cost->add_option("--box-seconds", box_s, "Seconds per box");

  auto* tr = app.add_subcommand("train", "Train a model");
  TrainArgs ta;
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--config", ta.config, "Training config JSON (defaults when omitted)");
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--scheme", ta.scheme, "Override: full|weak_b|weak_m|weak_mb");
  tr->add_option("--lgcfs", ta.lgcfs, "Override: off|first_frame|full_avg|full_noavg");
  tr->add_option("--blcl", ta.blcl, "Override: comma list of lv,cc,pseudo or none");
  tr->add_option("--max-steps", ta.max_steps, "Override max_steps (-1 keeps the config)");
  tr->add_option("--epochs", ta.epochs, "Override epochs (-1 keeps the config)");
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from");
  tr->add_flag("--verbose", ta.verbose, "Print progress to stderr");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_out, ev_split = "val", ev_masks;
  metrics::EvalOptions ev_opts;
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--out", ev_out, "Report JSON path")->required();
  ev->add_option("--split", ev_split, "train|val");
  ev->add_option("--threshold", ev_opts.binarize_threshold, "Binarization threshold on probabilities");
  ev->add_option("--tol", ev_opts.tol_fraction, "Boundary tolerance as a fraction of the image diagonal");
  ev->add_flag("--inclusive", ev_opts.inclusive_precision, "Count IoU == threshold in P@X");
  ev->add_option("--masks-dir", ev_masks, "Also write binarized predicted masks here");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate a grid of configurations");
  std::string ab_data, ab_grid, ab_out;
  bool ab_verbose = false;
  ab->add_option("--data", ab_data, "Dataset directory")->required();
  ab->add_option("--grid", ab_grid, "Grid JSON file")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_flag("--verbose", ab_verbose, "Print progress to stderr");

  std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    ta.blcl_set = tr->count("--blcl") > 0;
    if (*gen) return cmd_gen(gen_out, gen_videos, gen_val, gen_frames, gen_size, gen_seed, out);
    if (*conv) return cmd_convert(conv_data, conv_scheme, conv_out, out);
    if (*cost) return cmd_cost(cost_data, cost_scheme, mask_s, box_s, out);
    if (*tr) return cmd_train(ta, out, err);
    if (*ev) return cmd_eval(ev_data, ev_ckpt, ev_out, ev_split, ev_opts, ev_masks, out);
    if (*ab) return cmd_ablate(ab_data, ab_grid, ab_out, ab_verbose, out, err);
  } catch (const Error& e) {
    err << "error: " << kind_name(e.kind()) << ": " << one_line(e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: data: " << one_line(e.what()) << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: data: " << one_line(e.what()) << "\n";
    return 3;
  }
  return 2;
}

}  // namespace rvos::cli
