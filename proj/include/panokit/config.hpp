#pragma once

// JSON run configuration. Every section rejects unknown keys; missing keys
// keep their defaults. PANOKIT_SEED in the environment overrides "seed".

#include <cstdlib>
#include <map>
#include <set>
#include <string>

#include "json.hpp"
#include "panokit/loss.hpp"
#include "panokit/mask_io.hpp"
#include "panokit/model.hpp"
#include "panokit/scene.hpp"

namespace panokit {

inline constexpr std::size_t kMaxClipLength = 100;

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t clips_per_epoch = 24;
  std::size_t clip_length = 24;
  std::size_t warmup_epochs = 2;     ///< memory sees the ground-truth mask every frame
  std::size_t gt_memory_period = 8;  ///< afterwards, every this many frames
  std::size_t lsmm_start_epoch = 2;  ///< 0-based epoch from which long-term slots are used
  double learning_rate = 1e-3;
  double lr_floor = 0.05;  ///< final learning rate as a fraction of the initial one (cosine decay)
  double weight_decay = 0.0;
  double grad_clip = 1.0;  ///< global L2 norm; 0 disables
  double prev_mask_dropout = 0.1;  ///< chance a tracked frame decodes without the previous mask
  double unselected_mask_weight = 0.05;  ///< share of the mask loss spread over the masks not selected
  double ema_decay = 0.0;  ///< if > 0, the trained weights are an exponential moving average over steps

  void validate() const {
    if (epochs == 0 || clips_per_epoch == 0) throw ConfigError("train: epochs and clips_per_epoch must be positive");
    if (clip_length < 2 || clip_length > kMaxClipLength)
      throw ConfigError("train: clip_length must be in [2, " + std::to_string(kMaxClipLength) + "]");
    if (gt_memory_period == 0) throw ConfigError("train: gt_memory_period must be positive");
    if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw ConfigError("train: lr_floor must be in [0, 1]");
    if (!(learning_rate > 0.0) || weight_decay < 0.0 || grad_clip < 0.0)
      throw ConfigError("train: learning_rate must be positive, weight_decay and grad_clip nonnegative");
    if (!(unselected_mask_weight >= 0.0 && unselected_mask_weight < 1.0))
      throw ConfigError("train: unselected_mask_weight must be in [0, 1)");
    if (prev_mask_dropout < 0.0 || prev_mask_dropout > 1.0) throw ConfigError("train: prev_mask_dropout must be in [0, 1]");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must be in [0, 1)");
  }
};

/// Synthetic clip distribution (angles in degrees).
struct DataConfig {
  std::size_t height = 64;
  std::size_t width = 128;
  double radius_min_deg = 14.0, radius_max_deg = 22.0;
  double speed_min_deg = 3.0, speed_max_deg = 6.0;
  double max_start_lat_deg = 55.0;
  std::size_t distractors = 1;
  double occlusion_prob = 0.3;
  std::size_t occlusion_min = 6, occlusion_max = 8;
  std::size_t occlusion_start_min = 8;
  double hue_drift = 0.15;
  std::size_t eval_sequences = 8;

  SceneSampling sampling(std::size_t n_frames) const {
    SceneSampling s;
    s.grid = {height, width};
    s.n_frames = n_frames;
    s.radius_min = deg2rad(radius_min_deg);
    s.radius_max = deg2rad(radius_max_deg);
    s.speed_min = deg2rad(speed_min_deg);
    s.speed_max = deg2rad(speed_max_deg);
    s.max_start_lat = deg2rad(max_start_lat_deg);
    s.distractors = distractors;
    s.occlusion_prob = occlusion_prob;
    s.occlusion_min = occlusion_min;
    s.occlusion_max = occlusion_max;
    s.occlusion_start_min = occlusion_start_min;
    s.hue_drift = hue_drift;
    return s;
  }

  void validate() const {
    if (height == 0 || height % 16 || width % 16) throw ConfigError("data: height and width must be positive multiples of 16");
    try {
      ErpGrid{height, width}.validate();
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("data: ") + e.what());
    }
    if (!(0.0 < radius_min_deg && radius_min_deg <= radius_max_deg && radius_max_deg < 45.0))
      throw ConfigError("data: need 0 < radius_min_deg <= radius_max_deg < 45");
    if (!(0.0 <= speed_min_deg && speed_min_deg <= speed_max_deg)) throw ConfigError("data: bad speed range");
    if (occlusion_min == 0 || occlusion_min > occlusion_max) throw ConfigError("data: bad occlusion length range");
    if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ConfigError("data: occlusion_prob must be in [0, 1]");
  }
};

struct IoConfig {
  std::string checkpoint;  ///< written by train when set
  std::string loss_curve;  ///< JSON loss record written by train when set
};

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  WeightParams weights;
  LossWeights lambdas;
  WeightGeometry window;
  TrainConfig train;
  DataConfig data;
  IoConfig io;

  void validate() const {
    model.validate();
    weights.validate();
    lambdas.validate();
    if (window.out_h < 2 || window.out_w < 2 || !(window.margin >= 1.0))
      throw ConfigError("loss: window must be at least 2x2 and bfov_margin >= 1");
    train.validate();
    data.validate();
    if (train.lsmm_start_epoch > train.epochs) throw ConfigError("train: lsmm_start_epoch beyond the last epoch");
  }
};

/// Calls f(section, key, field) for every configurable value; section "" is the top level.
template <class Cfg, class F>
void visit_fields(Cfg& c, F&& f) {
  f("", "seed", c.seed);
  f("model", "d_feat", c.model.decoder.d_feat);
  f("model", "d_p", c.model.decoder.d_p);
  f("model", "c_s", c.model.decoder.c_s);
  f("model", "c_d", c.model.decoder.c_d);
  f("model", "attn_rounds", c.model.decoder.attn_rounds);
  f("model", "fuse_prev_mask", c.model.decoder.fuse_prev_mask);
  f("model", "enc_c1", c.model.enc_c1);
  f("model", "padding", c.model.padding);
  f("model", "d_m", c.model.lsmm.d_m);
  f("model", "long_term", c.model.lsmm.long_term);
  f("loss", "w_min", c.weights.w_min);
  f("loss", "w_max", c.weights.w_max);
  f("loss", "alpha", c.weights.alpha);
  f("loss", "lambda_bce", c.lambdas.lambda_bce);
  f("loss", "lambda_dice", c.lambdas.lambda_dice);
  f("loss", "lambda_iou", c.lambdas.lambda_iou);
  f("loss", "lambda_occ", c.lambdas.lambda_occ);
  f("loss", "window", c.window.out_h);
  f("loss", "bfov_margin", c.window.margin);
  f("train", "epochs", c.train.epochs);
  f("train", "clips_per_epoch", c.train.clips_per_epoch);
  f("train", "clip_length", c.train.clip_length);
  f("train", "warmup_epochs", c.train.warmup_epochs);
  f("train", "lr_floor", c.train.lr_floor);
  f("train", "gt_memory_period", c.train.gt_memory_period);
  f("train", "lsmm_start_epoch", c.train.lsmm_start_epoch);
  f("train", "learning_rate", c.train.learning_rate);
  f("train", "weight_decay", c.train.weight_decay);
  f("train", "grad_clip", c.train.grad_clip);
  f("train", "prev_mask_dropout", c.train.prev_mask_dropout);
  f("train", "unselected_mask_weight", c.train.unselected_mask_weight);
  f("train", "ema_decay", c.train.ema_decay);
  f("data", "height", c.data.height);
  f("data", "width", c.data.width);
  f("data", "radius_min_deg", c.data.radius_min_deg);
  f("data", "radius_max_deg", c.data.radius_max_deg);
  f("data", "speed_min_deg", c.data.speed_min_deg);
  f("data", "speed_max_deg", c.data.speed_max_deg);
  f("data", "max_start_lat_deg", c.data.max_start_lat_deg);
  f("data", "distractors", c.data.distractors);
  f("data", "occlusion_prob", c.data.occlusion_prob);
  f("data", "occlusion_min", c.data.occlusion_min);
  f("data", "occlusion_max", c.data.occlusion_max);
  f("data", "occlusion_start_min", c.data.occlusion_start_min);
  f("data", "hue_drift", c.data.hue_drift);
  f("data", "eval_sequences", c.data.eval_sequences);
  f("io", "checkpoint", c.io.checkpoint);
  f("io", "loss_curve", c.io.loss_curve);
}

namespace detail {

inline void read_value(const nlohmann::json& j, const std::string& where, std::uint64_t& v) {
  if (!j.is_number_unsigned()) throw ConfigError(where + ": expected a nonnegative integer");
  v = j.get<std::uint64_t>();
}
inline void read_value(const nlohmann::json& j, const std::string& where, double& v) {
  if (!j.is_number()) throw ConfigError(where + ": expected a number");
  v = j.get<double>();
}
inline void read_value(const nlohmann::json& j, const std::string& where, bool& v) {
  if (!j.is_boolean()) throw ConfigError(where + ": expected true or false");
  v = j.get<bool>();
}
inline void read_value(const nlohmann::json& j, const std::string& where, std::string& v) {
  if (!j.is_string()) throw ConfigError(where + ": expected a string");
  v = j.get<std::string>();
}
inline void read_value(const nlohmann::json& j, const std::string& where, HorizontalPad& v) {
  std::string s;
  read_value(j, where, s);
  if (s == "wrap") v = HorizontalPad::Wrap;
  else if (s == "zero") v = HorizontalPad::Zero;
  else throw ConfigError(where + ": expected \"wrap\" or \"zero\"");
}

template <class V>
nlohmann::ordered_json write_value(const V& v) {
  return v;
}
inline nlohmann::ordered_json write_value(const HorizontalPad& v) { return v == HorizontalPad::Wrap ? "wrap" : "zero"; }

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  std::map<std::string, std::set<std::string>> known;
  visit_fields(c, [&](const std::string& section, const std::string& key, auto& field) {
    known[section].insert(key);
    const nlohmann::json* obj = &doc;
    if (!section.empty()) {
      if (!doc.contains(section)) return;
      obj = &doc.at(section);
      if (!obj->is_object()) throw ConfigError(section + ": expected an object");
    }
    if (obj->contains(key)) detail::read_value(obj->at(key), section.empty() ? key : section + "." + key, field);
  });
  for (const auto& [k, v] : doc.items()) {
    const bool is_section = !k.empty() && known.count(k);
    if (!is_section && !known[""].count(k)) throw ConfigError("unknown key \"" + k + "\"");
  }
  for (const auto& [section, keys] : known) {
    if (section.empty() || !doc.contains(section)) continue;
    for (const auto& [k, v] : doc.at(section).items())
      if (!keys.count(k)) throw ConfigError("unknown key \"" + section + "." + k + "\"");
  }
  c.window.out_w = c.window.out_h;
  c.validate();
  return c;
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  visit_fields(c, [&](const std::string& section, const std::string& key, const auto& field) {
    if (section.empty()) doc[key] = detail::write_value(field);
    else doc[section][key] = detail::write_value(field);
  });
  return doc;
}

/// Replaces the seed when PANOKIT_SEED is set to an unsigned integer.
inline void apply_env_overrides(RunConfig& c) {
  const char* s = std::getenv("PANOKIT_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw ConfigError("PANOKIT_SEED must be an unsigned integer");
  c.seed = v;
}

inline RunConfig load_run_config(const std::string& path) {
  const std::string text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = run_config_from_json(doc);
  apply_env_overrides(c);
  return c;
}

/// Model hyperparameters with the run seed applied to initialization.
inline ModelConfig model_config(const RunConfig& c) {
  ModelConfig m = c.model;
  m.init_seed = c.seed;
  m.lsmm.rng_seed = c.seed ^ 0x5eed5eedull;
  return m;
}

}  // namespace panokit
