// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/config.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "instap/rng.hpp"

namespace instap {

using nlohmann::json;

namespace {

/// Reads known keys out of one JSON object and reports leftovers.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key \"" + key + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
}

json model_to_json(const model::ModelConfig& c) {
  return json{{"dim", c.dim},           {"proj_dim", c.proj_dim},   {"encoder_layers", c.encoder_layers},
              {"text_layers", c.text_layers}, {"fusion_layers", c.fusion_layers}, {"heads", c.heads},
              {"patch", c.patch},       {"mlp_ratio", c.mlp_ratio}, {"max_frames", c.max_frames},
              {"max_grid", c.max_grid}, {"text_len", c.text_len},   {"crop_h", c.crop_h},
              {"crop_w", c.crop_w},     {"vocab_size", c.vocab_size}};
}

model::ModelConfig model_from_json(const json& j, const std::string& where) {
  model::ModelConfig c;
  Reader r(j, where);
  r.get("dim", c.dim);
  r.get("proj_dim", c.proj_dim);
  r.get("encoder_layers", c.encoder_layers);
  r.get("text_layers", c.text_layers);
  r.get("fusion_layers", c.fusion_layers);
  r.get("heads", c.heads);
  r.get("patch", c.patch);
  r.get("mlp_ratio", c.mlp_ratio);
  r.get("max_frames", c.max_frames);
  r.get("max_grid", c.max_grid);
  r.get("text_len", c.text_len);
  r.get("crop_h", c.crop_h);
  r.get("crop_w", c.crop_w);
  r.get("vocab_size", c.vocab_size);
  r.finish();
  return c;
}

json scene_to_json(const SceneConfig& s) {
  return json{{"height", s.height},         {"width", s.width},       {"frames", s.frames},
              {"min_objects", s.min_objects}, {"max_objects", s.max_objects}, {"min_size", s.min_size},
              {"max_size", s.max_size},     {"max_speed", s.max_speed}};
}

SceneConfig scene_from_json(const json& j, const std::string& where) {
  SceneConfig s;
  Reader r(j, where);
  r.get("height", s.height);
  r.get("width", s.width);
  r.get("frames", s.frames);
  r.get("min_objects", s.min_objects);
  r.get("max_objects", s.max_objects);
  r.get("min_size", s.min_size);
  r.get("max_size", s.max_size);
  r.get("max_speed", s.max_speed);
  r.finish();
  return s;
}

}  // namespace

std::string_view to_string(Stage stage) { return stage == Stage::kPretrain ? "pretrain" : "align"; }

Stage stage_from_string(std::string_view s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "align") return Stage::kAlign;
  throw ConfigError("unknown stage \"" + std::string(s) + "\"");
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.mask_ratio >= 0.0 && c.mask_ratio < 1.0, "mask_ratio must lie in [0, 1)");
  require(c.frames_per_clip >= 1, "frames_per_clip must be at least 1");
  require(c.batch_size >= 1, "batch_size must be at least 1");
  require(c.stage != Stage::kAlign || c.batch_size >= 2, "align needs batch_size >= 2");
  require(c.epochs >= 1, "epochs must be at least 1");
  require(c.max_steps >= 0, "max_steps must be non-negative");
  require(c.base_lr > 0.0, "base_lr must be positive");
  require(c.warmup_fraction >= 0.0 && c.warmup_fraction < 1.0, "warmup_fraction must lie in [0, 1)");
  require(c.weight_decay >= 0.0, "weight_decay must be non-negative");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0 && c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0,
          "adam betas must lie in [0, 1)");
  require(c.adam_eps > 0.0, "adam_eps must be positive");
  require(c.mlm_ratio >= 0.0 && c.mlm_ratio <= 1.0, "mlm_ratio must lie in [0, 1]");
  require(c.checkpoint_every >= 0, "checkpoint_every must be non-negative");
  const LossWeights& w = c.loss_weights;
  for (double v : {w.vtc, w.vtm, w.mlm, w.vtc_inst, w.vtm_inst, w.mlm_inst}) {
    require(std::isfinite(v) && v >= 0.0, "loss weights must be finite and non-negative");
  }
  if (c.model.vocab_size != 0) {
    try {
      model::validate_config(c.model);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
}

TrainConfig train_config_from_json_text(const std::string& text) {
  const json j = parse(text);
  TrainConfig c;
  Reader r(j, "config");
  std::string stage = std::string(to_string(c.stage));
  r.get("stage", stage);
  c.stage = stage_from_string(stage);
  if (const json* m = r.child("model")) c.model = model_from_json(*m, "config.model");
  r.get("mask_ratio", c.mask_ratio);
  r.get("frames_per_clip", c.frames_per_clip);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("max_steps", c.max_steps);
  r.get("base_lr", c.base_lr);
  r.get("warmup_fraction", c.warmup_fraction);
  r.get("weight_decay", c.weight_decay);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("mlm_ratio", c.mlm_ratio);
  if (const json* w = r.child("loss_weights")) {
    Reader wr(*w, "config.loss_weights");
    wr.get("vtc", c.loss_weights.vtc);
    wr.get("vtm", c.loss_weights.vtm);
    wr.get("mlm", c.loss_weights.mlm);
    wr.get("vtc_inst", c.loss_weights.vtc_inst);
    wr.get("vtm_inst", c.loss_weights.vtm_inst);
    wr.get("mlm_inst", c.loss_weights.mlm_inst);
    wr.finish();
  }
  r.get("independent_inst_temperature", c.independent_inst_temperature);
  r.get("keep_rec_in_align", c.keep_rec_in_align);
  if (const json* s = r.child("seeds")) {
    Reader sr(*s, "config.seeds");
    sr.get("data", c.seeds.data);
    sr.get("init", c.seeds.init);
    sr.get("dropout", c.seeds.dropout);
    sr.finish();
  }
  r.get("caption_subsampling", c.caption_subsampling);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("init_checkpoint", c.init_checkpoint);
  r.finish();
  validate(c);
  return c;
}

std::string to_json_text(const TrainConfig& c) {
  const LossWeights& w = c.loss_weights;
  json j{{"stage", std::string(to_string(c.stage))},
         {"model", model_to_json(c.model)},
         {"mask_ratio", c.mask_ratio},
         {"frames_per_clip", c.frames_per_clip},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"max_steps", c.max_steps},
         {"base_lr", c.base_lr},
         {"warmup_fraction", c.warmup_fraction},
         {"weight_decay", c.weight_decay},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"adam_eps", c.adam_eps},
         {"mlm_ratio", c.mlm_ratio},
         {"loss_weights",
          {{"vtc", w.vtc}, {"vtm", w.vtm}, {"mlm", w.mlm}, {"vtc_inst", w.vtc_inst}, {"vtm_inst", w.vtm_inst},
           {"mlm_inst", w.mlm_inst}}},
         {"independent_inst_temperature", c.independent_inst_temperature},
         {"keep_rec_in_align", c.keep_rec_in_align},
         {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"dropout", c.seeds.dropout}}},
         {"caption_subsampling", c.caption_subsampling},
         {"checkpoint_every", c.checkpoint_every},
         {"init_checkpoint", c.init_checkpoint}};
  return j.dump(2);
}

TrainConfig read_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::filesystem::filesystem_error("cannot open config", path, std::make_error_code(std::errc::no_such_file_or_directory));
  std::stringstream ss;
  ss << in.rdbuf();
  return train_config_from_json_text(ss.str());
}

std::string model_config_to_json_text(const model::ModelConfig& config) { return model_to_json(config).dump(); }

model::ModelConfig model_config_from_json_text(const std::string& text) {
  return model_from_json(parse(text), "model");
}

DataConfig data_config_from_json_text(const std::string& text) {
  const json j = parse(text);
  DataConfig c;
  Reader r(j, "data");
  r.get("scenes", c.scenes);
  r.get("test_scenes", c.test_scenes);
  r.get("zero_scenes", c.zero_scenes);
  if (const json* s = r.child("scene")) c.scene = scene_from_json(*s, "data.scene");
  r.finish();
  if (c.scenes < 0 || c.test_scenes < 0 || c.zero_scenes < 0) throw ConfigError("scene counts must be non-negative");
  return c;
}

std::string to_json_text(const DataConfig& c) {
  return json{{"scenes", c.scenes}, {"test_scenes", c.test_scenes}, {"zero_scenes", c.zero_scenes},
              {"scene", scene_to_json(c.scene)}}
      .dump(2);
}

std::string content_hash(const std::string& text) {
  const std::uint64_t h = fnv1a(text);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace instap
