// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training configuration and its JSON form. Every key is optional and
// defaults to the value below; unknown keys (at any nesting level) are
// rejected so typos cannot silently fall back to defaults.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "instap/losses.hpp"
#include "instap/model.hpp"
#include "instap/shapes_world.hpp"

namespace instap {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { kPretrain, kAlign };
std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view s);

struct Seeds {
  std::uint64_t data = 0;     // scene generation, shuffling, caption cycling
  std::uint64_t init = 0;     // parameter initialisation
  std::uint64_t dropout = 0;  // MLM masks and hard-negative sampling

  friend bool operator==(const Seeds&, const Seeds&) = default;
};

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  model::ModelConfig model;
  double mask_ratio = 0.8;
  int frames_per_clip = 4;
  int batch_size = 8;
  int epochs = 1;
  /// Caps the step count when positive.
  int max_steps = 0;
  double base_lr = 1e-3;
  double warmup_fraction = 0.1;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double mlm_ratio = 0.15;
  LossWeights loss_weights;
  bool independent_inst_temperature = true;
  bool keep_rec_in_align = false;
  Seeds seeds;
  bool caption_subsampling = true;
  /// Steps between checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;
  /// Stage-1 checkpoint whose video encoder seeds stage 2; empty = none.
  std::string init_checkpoint;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Throws ConfigError when an invariant fails (rho in [0,1), B >= 2 for
/// align, epochs >= 1, ...).
void validate(const TrainConfig& config);

/// Throws ConfigError on unknown keys, wrong types or failed validation.
TrainConfig train_config_from_json_text(const std::string& text);
std::string to_json_text(const TrainConfig& config);
TrainConfig read_train_config(const std::filesystem::path& path);

std::string model_config_to_json_text(const model::ModelConfig& config);
model::ModelConfig model_config_from_json_text(const std::string& text);

/// Shapes-world generation parameters for gen-data, same strictness.
struct DataConfig {
  int scenes = 64;
  int test_scenes = 0;
  int zero_scenes = 0;
  SceneConfig scene;
};
DataConfig data_config_from_json_text(const std::string& text);
std::string to_json_text(const DataConfig& config);

/// FNV-1a of the canonical JSON text, as 16 hex digits.
std::string content_hash(const std::string& text);

}  // namespace instap
