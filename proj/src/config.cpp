#include "rvos/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "rvos/errors.hpp"

namespace rvos::train {

using nlohmann::json;

namespace {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw UsageError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw UsageError(ctx_ + "." + key + ": " + e.what());
    }
  }

  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (present) out = parse(s);
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw UsageError(ctx_ + ": unknown field '" + k + "'");
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace

ClipSampling parse_clip_sampling(const std::string& s) {
  if (s == "contain_annotation") return ClipSampling::ContainAnnotation;
  if (s == "uniform") return ClipSampling::Uniform;
  throw UsageError("unknown clip_sampling '" + s + "' (contain_annotation|uniform)");
}

std::string to_string(ClipSampling s) { return s == ClipSampling::Uniform ? "uniform" : "contain_annotation"; }

void TrainConfig::validate() const {
  if (clip_len < 1) throw UsageError("clip_len must be >= 1");
  if (batch_clips < 1) throw UsageError("batch_clips must be >= 1");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (!(lr > 0) || !(lr_backbone >= 0)) throw UsageError("learning rates must be positive");
  if (!(lr_decay_factor > 0)) throw UsageError("lr_decay_factor must be positive");
  if (weight_decay < 0) throw UsageError("weight_decay must be >= 0");
  if (max_steps < 0) throw UsageError("max_steps must be >= 0");
  if (checkpoint_every_epochs < 1) throw UsageError("checkpoint_every_epochs must be >= 1");
  for (int e : lr_decay_epochs)
    if (e < 1) throw UsageError("lr_decay_epochs entries must be >= 1");
  blcl.validate();
  loss_weights.validate();
}

model::ModelConfig TrainConfig::resolved_model(int vocab_size) const {
  model::ModelConfig m = model;
  m.vocab_size = vocab_size;
  m.seed = seed;
  m.use_enhanced = use_enhanced.value_or(blcl.any_enabled());
  if (blcl.any_enabled() && !m.use_enhanced) throw UsageError("BLCL terms need the enhanced head (use_enhanced)");
  m.validate();
  return m;
}

json to_json(const model::ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"embed_dim", c.embed_dim},
          {"encoder_channels", c.encoder_channels}, {"stem_channels", c.stem_channels},
          {"n_attn_heads", c.n_attn_heads},     {"filter_layers", c.filter_layers},
          {"filter_hidden", c.filter_hidden},   {"blcl_dim", c.blcl_dim},
          {"fpn_out_channels", c.fpn_out_channels}, {"enh_channels", c.enh_channels},
          {"use_enhanced", c.use_enhanced},     {"seed", c.seed}};
}

json to_json(const contrast::BlclConfig& c) {
  return {{"d_th", c.d_th},
          {"max_samples_per_frame", c.max_samples_per_frame},
          {"pseudo_enabled", c.pseudo_enabled},
          {"lv_enabled", c.lv_enabled},
          {"cc_enabled", c.cc_enabled},
          {"pseudo_start_epoch", c.pseudo_start_epoch}};
}

json to_json(const losses::LossWeights& c) {
  return {{"dice", c.dice},           {"focal", c.focal}, {"focal_alpha", c.focal_alpha},
          {"focal_gamma", c.focal_gamma}, {"mil", c.mil},     {"smooth_eps", c.smooth_eps}};
}

json to_json(const TrainConfig& c) {
  json j{{"clip_len", c.clip_len},
         {"batch_clips", c.batch_clips},
         {"lr", c.lr},
         {"lr_backbone", c.lr_backbone},
         {"epochs", c.epochs},
         {"lr_decay_epochs", c.lr_decay_epochs},
         {"lr_decay_factor", c.lr_decay_factor},
         {"weight_decay", c.weight_decay},
         {"grad_clip_norm", c.grad_clip_norm},
         {"seed", c.seed},
         {"scheme", data::to_string(c.scheme)},
         {"lgcfs_mode", losses::to_string(c.lgcfs_mode)},
         {"blcl", to_json(c.blcl)},
         {"loss_weights", to_json(c.loss_weights)},
         {"clip_sampling", to_string(c.clip_sampling)},
         {"hflip", c.hflip},
         {"max_steps", c.max_steps},
         {"checkpoint_every_epochs", c.checkpoint_every_epochs},
         {"model", to_json(c.model)}};
  j["use_enhanced"] = c.use_enhanced ? json(*c.use_enhanced) : json(nullptr);
  return j;
}

model::ModelConfig model_config_from_json(const json& j, model::ModelConfig c) {
  ObjectReader r(j, "model");
  r.get("vocab_size", c.vocab_size);
  r.get("embed_dim", c.embed_dim);
  r.get("encoder_channels", c.encoder_channels);
  r.get("stem_channels", c.stem_channels);
  r.get("n_attn_heads", c.n_attn_heads);
  r.get("filter_layers", c.filter_layers);
  r.get("filter_hidden", c.filter_hidden);
  r.get("blcl_dim", c.blcl_dim);
  r.get("fpn_out_channels", c.fpn_out_channels);
  r.get("enh_channels", c.enh_channels);
  r.get("use_enhanced", c.use_enhanced);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

contrast::BlclConfig blcl_config_from_json(const json& j, contrast::BlclConfig c) {
  ObjectReader r(j, "blcl");
  r.get("d_th", c.d_th);
  r.get("max_samples_per_frame", c.max_samples_per_frame);
  r.get("pseudo_enabled", c.pseudo_enabled);
  r.get("lv_enabled", c.lv_enabled);
  r.get("cc_enabled", c.cc_enabled);
  r.get("pseudo_start_epoch", c.pseudo_start_epoch);
  r.finish();
  return c;
}

losses::LossWeights loss_weights_from_json(const json& j, losses::LossWeights c) {
  ObjectReader r(j, "loss_weights");
  r.get("dice", c.dice);
  r.get("focal", c.focal);
  r.get("focal_alpha", c.focal_alpha);
  r.get("focal_gamma", c.focal_gamma);
  r.get("mil", c.mil);
  r.get("smooth_eps", c.smooth_eps);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  ObjectReader r(j, "config");
  r.get("clip_len", c.clip_len);
  r.get("batch_clips", c.batch_clips);
  r.get("lr", c.lr);
  r.get("lr_backbone", c.lr_backbone);
  r.get("epochs", c.epochs);
  r.get("lr_decay_epochs", c.lr_decay_epochs);
  r.get("lr_decay_factor", c.lr_decay_factor);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip_norm", c.grad_clip_norm);
  r.get("seed", c.seed);
  r.get_enum("scheme", c.scheme, data::parse_scheme);
  r.get_enum("lgcfs_mode", c.lgcfs_mode, losses::parse_lgcfs_mode);
  r.get_enum("clip_sampling", c.clip_sampling, parse_clip_sampling);
  r.get("hflip", c.hflip);
  r.get("max_steps", c.max_steps);
  r.get("checkpoint_every_epochs", c.checkpoint_every_epochs);
  if (const json* b = r.sub("blcl")) c.blcl = blcl_config_from_json(*b, c.blcl);
  if (const json* w = r.sub("loss_weights")) c.loss_weights = loss_weights_from_json(*w, c.loss_weights);
  if (const json* m = r.sub("model")) c.model = model_config_from_json(*m, c.model);
  if (const json* u = r.sub("use_enhanced")) {
    if (u->is_null()) {
      c.use_enhanced.reset();
    } else if (u->is_boolean()) {
      c.use_enhanced = u->get<bool>();
    } else {
      throw UsageError("config.use_enhanced: expected a boolean or null");
    }
  }
  r.finish();
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

void save_train_config(const TrainConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << to_json(c).dump(2) << "\n";
}

void apply_blcl_toggles(contrast::BlclConfig& c, const std::string& list) {
  c.lv_enabled = c.cc_enabled = c.pseudo_enabled = false;
  if (list.empty() || list == "none") return;
  std::istringstream is(list);
  for (std::string item; std::getline(is, item, ',');) {
    if (item == "lv") {
      c.lv_enabled = true;
    } else if (item == "cc") {
      c.cc_enabled = true;
    } else if (item == "pseudo") {
      c.pseudo_enabled = true;
    } else {
      throw UsageError("unknown BLCL toggle '" + item + "' (lv,cc,pseudo)");
    }
  }
}

}  // namespace rvos::train
