// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Micro model and hand-placed micro scenes shared by the training tests and
// the acceptance gate.

#pragma once

#include <vector>

#include "instap/config.hpp"
#include "instap/model.hpp"
#include "instap/shapes_world.hpp"

namespace instap::testing {

inline const Vocab& micro_vocab() {
  static const Vocab vocab = shapes_world_vocab();
  return vocab;
}

/// d = 8 everywhere; 16×16 frames with P = 4 give 16 tokens per frame.
inline model::ModelConfig micro_model() {
  model::ModelConfig c;
  c.dim = 8;
  c.proj_dim = 8;
  c.encoder_layers = 1;
  c.text_layers = 1;
  c.fusion_layers = 1;
  c.heads = 2;
  c.patch = 4;
  c.mlp_ratio = 2;
  c.max_frames = 4;
  c.max_grid = 4;
  c.text_len = 8;
  c.crop_h = 8;
  c.crop_w = 8;
  c.vocab_size = micro_vocab().size();
  return c;
}

inline TrainConfig micro_train_config(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.model = micro_model();
  c.batch_size = 2;
  c.frames_per_clip = 2;
  c.mlm_ratio = 0.3;
  c.seeds = {11, 22, 33};
  return c;
}

/// Two 2-frame scenes on 16×16 canvases with `first` and `second` objects
/// (distinct sources).
inline std::vector<Sample> micro_samples(int first = 2, int second = 1) {
  const std::vector<SceneObject> pool = {
      {ShapeType::kSquare, 0, 5, 1, 1, 1, 0},
      {ShapeType::kCircle, 2, 5, 9, 9, -1, 0},
      {ShapeType::kTriangle, 3, 5, 1, 10, 0, -1},
  };
  std::vector<Sample> out;
  std::uint64_t seed = 1001;
  for (int count : {first, second}) {
    SceneProgram p;
    p.seed = seed++;
    p.height = 16;
    p.width = 16;
    p.frames = 2;
    p.objects.assign(pool.begin(), pool.begin() + count);
    out.push_back(render_sample(p));
  }
  return out;
}

inline std::vector<const Sample*> pointers(const std::vector<Sample>& samples) {
  std::vector<const Sample*> out;
  for (const Sample& s : samples) out.push_back(&s);
  return out;
}

}  // namespace instap::testing
