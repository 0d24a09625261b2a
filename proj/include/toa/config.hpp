#pragma once

// Run configuration: one JSON document covering model, data, both training
// stages, sampling and evaluation. Parsing is strict (unknown keys are
// errors) and serialization always writes every field, so a saved copy is a
// complete record of the run.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "toa/data.hpp"
#include "toa/model.hpp"

namespace toa {

using nlohmann::json;

enum class Stage { pretrain, finetune };

inline std::string stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }
inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw ConfigError("unknown stage '" + s + "' (expected pretrain or finetune)");
}

struct TrainConfig {
  Stage stage = Stage::pretrain;
  std::size_t batch_size = 32;
  std::size_t steps = 20000;
  double learning_rate = 2e-4;
  double p_drop_face = 0.1;
  double p_drop_garment = 0.1;
  double p_drop_text = 0.1;
  double p_drop_pose = 0.5;
  std::uint64_t seed = 1;
  bool corrupt = true;
  CorruptionConfig corruption;
  double max_expand_frac = 1.0;
  bool ema = false;
  double ema_decay = 0.999;

  static TrainConfig pretrain_defaults() { return {}; }
  static TrainConfig finetune_defaults() {
    TrainConfig c;
    c.stage = Stage::finetune;
    c.steps = 10000;
    c.learning_rate = 5e-5;
    c.corrupt = false;
    c.max_expand_frac = 0.5;
    return c;
  }

  void validate() const {
    for (double p : {p_drop_face, p_drop_garment, p_drop_text, p_drop_pose, corruption.p_jitter, corruption.p_drop_pixels,
                     corruption.drop_fraction, corruption.p_noise, corruption.p_caption_drop, max_expand_frac}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probabilities and fractions must lie in [0, 1]");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (ema && !(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in (0, 1)");
  }
};

struct SampleConfig {
  std::size_t steps = 100;
  double guidance = 3.0;
  double image_scale = 1.0;
};

struct EvalConfig {
  std::size_t n = 200;
  std::uint64_t seed = 3;
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  DatasetConfig data;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  TrainConfig finetune = TrainConfig::finetune_defaults();
  SampleConfig sample;
  EvalConfig eval;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json_value(const ModelConfig& m) {
  return {{"unet",
           {{"widths", m.unet.widths},
            {"time_width", m.unet.time_width},
            {"heads", m.unet.heads},
            {"groups", m.unet.groups},
            {"resolution", m.unet.resolution},
            {"pose_channels", m.unet.pose_channels},
            {"use_reference", m.unet.use_reference}}},
          {"adapter",
           {{"tokens", m.adapter.tokens},
            {"depth", m.adapter.depth},
            {"heads", m.adapter.heads},
            {"text_width", m.adapter.text_width},
            {"share_resampler", m.adapter.share_resampler},
            {"inject_once", m.adapter.inject_once}}},
          {"encoder",
           {{"input_res", m.encoder.input_res},
            {"patch", m.encoder.patch},
            {"width", m.encoder.width},
            {"blocks", m.encoder.blocks},
            {"heads", m.encoder.heads},
            {"seed", m.encoder.seed}}},
          {"text_length", m.text_length},
          {"schedule_steps", m.schedule_steps},
          {"posterior", m.posterior == PosteriorVariance::beta ? "beta" : "beta_tilde"},
          {"init_seed", m.init_seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read;
  ModelConfig m;
  check_keys(j, {"unet", "adapter", "encoder", "text_length", "schedule_steps", "posterior", "init_seed"}, "model");
  if (j.contains("unet")) {
    const auto& u = j["unet"];
    check_keys(u, {"widths", "time_width", "heads", "groups", "resolution", "pose_channels", "use_reference"}, "model.unet");
    read(u, "widths", m.unet.widths, "model.unet");
    read(u, "time_width", m.unet.time_width, "model.unet");
    read(u, "heads", m.unet.heads, "model.unet");
    read(u, "groups", m.unet.groups, "model.unet");
    read(u, "resolution", m.unet.resolution, "model.unet");
    read(u, "pose_channels", m.unet.pose_channels, "model.unet");
    read(u, "use_reference", m.unet.use_reference, "model.unet");
  }
  if (j.contains("adapter")) {
    const auto& a = j["adapter"];
    check_keys(a, {"tokens", "depth", "heads", "text_width", "share_resampler", "inject_once"}, "model.adapter");
    read(a, "tokens", m.adapter.tokens, "model.adapter");
    read(a, "depth", m.adapter.depth, "model.adapter");
    read(a, "heads", m.adapter.heads, "model.adapter");
    read(a, "text_width", m.adapter.text_width, "model.adapter");
    read(a, "share_resampler", m.adapter.share_resampler, "model.adapter");
    read(a, "inject_once", m.adapter.inject_once, "model.adapter");
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    check_keys(e, {"input_res", "patch", "width", "blocks", "heads", "seed"}, "model.encoder");
    read(e, "input_res", m.encoder.input_res, "model.encoder");
    read(e, "patch", m.encoder.patch, "model.encoder");
    read(e, "width", m.encoder.width, "model.encoder");
    read(e, "blocks", m.encoder.blocks, "model.encoder");
    read(e, "heads", m.encoder.heads, "model.encoder");
    read(e, "seed", m.encoder.seed, "model.encoder");
  }
  read(j, "text_length", m.text_length, "model");
  read(j, "schedule_steps", m.schedule_steps, "model");
  read(j, "init_seed", m.init_seed, "model");
  if (j.contains("posterior")) {
    const auto p = j["posterior"].get<std::string>();
    if (p == "beta") m.posterior = PosteriorVariance::beta;
    else if (p == "beta_tilde") m.posterior = PosteriorVariance::beta_tilde;
    else throw ConfigError("model.posterior must be beta or beta_tilde");
  }
  m.adapter.image_width = m.encoder.width;
  m.unet.context_width = m.adapter.text_width;
  return m;
}

inline json to_json_value(const TrainConfig& t) {
  json c;
  to_json(c, t.corruption);
  return {{"stage", stage_name(t.stage)},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"learning_rate", t.learning_rate},
          {"p_drop_face", t.p_drop_face},
          {"p_drop_garment", t.p_drop_garment},
          {"p_drop_text", t.p_drop_text},
          {"p_drop_pose", t.p_drop_pose},
          {"seed", t.seed},
          {"corrupt", t.corrupt},
          {"corruption", c},
          {"max_expand_frac", t.max_expand_frac},
          {"ema", t.ema},
          {"ema_decay", t.ema_decay}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig t, const std::string& where) {
  using detail::read;
  detail::check_keys(j,
                     {"stage", "batch_size", "steps", "learning_rate", "p_drop_face", "p_drop_garment", "p_drop_text",
                      "p_drop_pose", "seed", "corrupt", "corruption", "max_expand_frac", "ema", "ema_decay"},
                     where);
  if (j.contains("stage")) t.stage = parse_stage(j["stage"].get<std::string>());
  read(j, "batch_size", t.batch_size, where);
  read(j, "steps", t.steps, where);
  read(j, "learning_rate", t.learning_rate, where);
  read(j, "p_drop_face", t.p_drop_face, where);
  read(j, "p_drop_garment", t.p_drop_garment, where);
  read(j, "p_drop_text", t.p_drop_text, where);
  read(j, "p_drop_pose", t.p_drop_pose, where);
  read(j, "seed", t.seed, where);
  read(j, "corrupt", t.corrupt, where);
  read(j, "max_expand_frac", t.max_expand_frac, where);
  read(j, "ema", t.ema, where);
  read(j, "ema_decay", t.ema_decay, where);
  if (j.contains("corruption")) {
    const auto& c = j["corruption"];
    const auto w = where + ".corruption";
    detail::check_keys(c, {"p_jitter", "p_drop_pixels", "drop_fraction", "p_noise", "noise_sigma", "p_caption_drop"}, w);
    read(c, "p_jitter", t.corruption.p_jitter, w);
    read(c, "p_drop_pixels", t.corruption.p_drop_pixels, w);
    read(c, "drop_fraction", t.corruption.drop_fraction, w);
    read(c, "p_noise", t.corruption.p_noise, w);
    read(c, "noise_sigma", t.corruption.noise_sigma, w);
    read(c, "p_caption_drop", t.corruption.p_caption_drop, w);
  }
  t.validate();
  return t;
}

inline json to_json_value(const RunConfig& r) {
  return {{"seed", r.seed},
          {"model", to_json_value(r.model)},
          {"data", {{"seed", r.data.seed}, {"train", r.data.train}, {"test", r.data.test}, {"pretrain", r.data.pretrain}}},
          {"pretrain", to_json_value(r.pretrain)},
          {"finetune", to_json_value(r.finetune)},
          {"sample", {{"steps", r.sample.steps}, {"guidance", r.sample.guidance}, {"image_scale", r.sample.image_scale}}},
          {"eval", {{"n", r.eval.n}, {"seed", r.eval.seed}}}};
}

/// Strict parse; missing fields take their defaults. A top-level `seed`
/// fans out to every stream that is not set explicitly.
inline RunConfig run_config_from_json(const json& j) {
  using detail::read;
  detail::check_keys(j, {"seed", "model", "data", "pretrain", "finetune", "sample", "eval"}, "config");
  RunConfig r;
  read(j, "seed", r.seed, "config");
  r.data.seed = r.seed;
  r.model.init_seed = split_seed(r.seed, "model-init");
  r.pretrain.seed = split_seed(r.seed, "train-pretrain");
  r.finetune.seed = split_seed(r.seed, "train-finetune");
  r.eval.seed = split_seed(r.seed, "eval");
  if (j.contains("model")) {
    const auto init = r.model.init_seed;
    r.model = model_config_from_json(j["model"]);
    if (!j["model"].contains("init_seed")) r.model.init_seed = init;
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"seed", "train", "test", "pretrain"}, "data");
    read(d, "seed", r.data.seed, "data");
    read(d, "train", r.data.train, "data");
    read(d, "test", r.data.test, "data");
    read(d, "pretrain", r.data.pretrain, "data");
  }
  if (j.contains("pretrain")) r.pretrain = train_config_from_json(j["pretrain"], r.pretrain, "pretrain");
  if (j.contains("finetune")) r.finetune = train_config_from_json(j["finetune"], r.finetune, "finetune");
  r.pretrain.stage = Stage::pretrain;
  r.finetune.stage = Stage::finetune;
  if (j.contains("sample")) {
    const auto& s = j["sample"];
    detail::check_keys(s, {"steps", "guidance", "image_scale"}, "sample");
    read(s, "steps", r.sample.steps, "sample");
    read(s, "guidance", r.sample.guidance, "sample");
    read(s, "image_scale", r.sample.image_scale, "sample");
    if (!std::isfinite(r.sample.guidance) || r.sample.guidance < 0) throw ConfigError("sample.guidance must be finite and >= 0");
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, {"n", "seed"}, "eval");
    read(e, "n", r.eval.n, "eval");
    read(e, "seed", r.eval.seed, "eval");
  }
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return run_config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

/// Architecture fingerprint: checkpoints refuse to load across a change.
inline std::string model_config_hash(const ModelConfig& m) {
  auto j = to_json_value(m);
  j.erase("init_seed");
  return sha256_hex(j.dump());
}

}  // namespace toa
