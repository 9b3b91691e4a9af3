// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic "shapes-world" scenes: coloured circles, squares and triangles
// translating at constant integer velocity on a black canvas, with templated
// global and per-instance captions over a closed vocabulary.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "instap/schema.hpp"

namespace instap {

enum class ShapeType { kCircle, kSquare, kTriangle };
inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 8;

struct Rgb8 {
  std::uint8_t r, g, b;
};

/// red, green, blue, yellow, magenta, cyan, orange, white
const std::array<Rgb8, kNumColors>& palette();
const std::string& color_name(int color);
const std::string& shape_name(ShapeType shape);

/// The shape/colour pairing withheld from the train/test splits and forced
/// into every "zero" scene.
inline constexpr ShapeType kHeldOutShape = ShapeType::kTriangle;
inline constexpr int kHeldOutColor = 1;  // green

struct SceneObject {
  ShapeType shape = ShapeType::kCircle;
  int color = 0;
  /// Extent in pixels; the shape's tight box is [x, x+size) × [y, y+size).
  int size = 1;
  int x = 0;
  int y = 0;
  int vx = 0;
  int vy = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneProgram {
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  int frames = 1;
  std::vector<SceneObject> objects;

  friend bool operator==(const SceneProgram&, const SceneProgram&) = default;
};

enum class ComboPolicy { kAny, kExcludeHeldOut, kRequireHeldOut };

struct SceneConfig {
  int height = 64;
  int width = 64;
  int frames = 4;
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 8;
  int max_size = 16;
  int max_speed = 2;
  ComboPolicy combo = ComboPolicy::kAny;
};

/// Deterministic in (seed, config). Objects never leave the canvas and never
/// overlap (1 px gap) on any frame; colours are unique within a scene.
/// Throws std::invalid_argument for impossible configurations and
/// std::runtime_error when placement fails.
SceneProgram generate_scene(std::uint64_t seed, const SceneConfig& config);

/// Integer rasterisation in object order.
FrameStack rasterize(const SceneProgram& program);

/// Frames, one instance per object (tight per-frame boxes), templated
/// captions, source_id = seed. `sample_id` defaults to "scene-<seed>".
Sample render_sample(const SceneProgram& program, std::string sample_id = {});

/// Size word is "small" when 5·size < min(H, W), else "large".
std::vector<std::string> instance_caption(const SceneObject& object, const SceneProgram& program);
std::vector<std::string> global_caption(const SceneProgram& program);

/// Closed vocabulary covering every caption template.
Vocab shapes_world_vocab();

enum class Split { kTrain, kTest, kZero };
std::string_view to_string(Split split);
Split split_from_string(std::string_view s);

/// Seed of scene `index` in `split`; the three splits use disjoint ranges.
std::uint64_t scene_seed(Split split, std::uint64_t data_seed, std::uint64_t index);

/// `count` rendered samples with ids "<split>-NNNNNN", ordered by id.
/// Generation is split across `threads` workers; output is independent of it.
std::vector<Sample> generate_split(Split split, int count, std::uint64_t data_seed,
                                   SceneConfig config, int threads = 1);

}  // namespace instap
