// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/shapes_world.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

#include "instap/parallel.hpp"

namespace instap {

const std::array<Rgb8, kNumColors>& palette() {
  static const std::array<Rgb8, kNumColors> kPalette = {{
      {220, 40, 40},    // red
      {40, 200, 60},    // green
      {40, 80, 230},    // blue
      {230, 220, 40},   // yellow
      {210, 50, 210},   // magenta
      {40, 210, 220},   // cyan
      {240, 140, 30},   // orange
      {240, 240, 240},  // white
  }};
  return kPalette;
}

const std::string& color_name(int color) {
  static const std::array<std::string, kNumColors> kNames = {
      "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"};
  return kNames.at(static_cast<std::size_t>(color));
}

const std::string& shape_name(ShapeType shape) {
  static const std::array<std::string, kNumShapes> kNames = {"circle", "square", "triangle"};
  return kNames.at(static_cast<std::size_t>(shape));
}

namespace {

bool is_held_out(ShapeType shape, int color) {
  return shape == kHeldOutShape && color == kHeldOutColor;
}

// Boxes of a and b stay at least one pixel apart on every frame.
bool separated(const SceneObject& a, const SceneObject& b, int frames) {
  for (int t = 0; t < frames; ++t) {
    const int ax = a.x + a.vx * t, ay = a.y + a.vy * t;
    const int bx = b.x + b.vx * t, by = b.y + b.vy * t;
    const bool apart = ax + a.size + 1 <= bx || bx + b.size + 1 <= ax ||
                       ay + a.size + 1 <= by || by + b.size + 1 <= ay;
    if (!apart) return false;
  }
  return true;
}

// Admissible start coordinates for extent `size` moving `v` px/frame.
bool start_range(int canvas, int size, int v, int frames, int& lo, int& hi) {
  const int travel = v * (frames - 1);
  lo = std::max(0, -travel);
  hi = std::min(canvas - size, canvas - size - travel);
  return lo <= hi;
}

bool covers(ShapeType shape, int size, int u, int v) {
  switch (shape) {
    case ShapeType::kSquare:
      return true;
    case ShapeType::kCircle: {
      const int du = 2 * u + 1 - size;
      const int dv = 2 * v + 1 - size;
      return du * du + dv * dv <= size * size;
    }
    case ShapeType::kTriangle: {
      const int du = 2 * u + 1 - size;
      return (du < 0 ? -du : du) <= v + 1;
    }
  }
  return false;
}

constexpr int kPlacementAttempts = 500;

}  // namespace

SceneProgram generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.frames < 1) throw std::invalid_argument("generate_scene: frames must be >= 1");
  if (cfg.min_objects < 1 || cfg.max_objects > 8 || cfg.min_objects > cfg.max_objects) {
    throw std::invalid_argument("generate_scene: object count range must lie within [1, 8]");
  }
  if (cfg.min_size < 1 || cfg.min_size > cfg.max_size) {
    throw std::invalid_argument("generate_scene: invalid object size range");
  }
  if (cfg.max_size > std::min(cfg.height, cfg.width)) {
    throw std::invalid_argument("generate_scene: object size " + std::to_string(cfg.max_size) +
                                " cannot be contained in a " + std::to_string(cfg.height) + "x" +
                                std::to_string(cfg.width) + " canvas");
  }
  if (cfg.max_speed < 0) throw std::invalid_argument("generate_scene: max_speed must be >= 0");

  Rng rng(seed);
  SceneProgram prog;
  prog.seed = seed;
  prog.height = cfg.height;
  prog.width = cfg.width;
  prog.frames = cfg.frames;

  const int count = static_cast<int>(rng.range(cfg.min_objects, cfg.max_objects));
  std::vector<bool> color_used(kNumColors, false);

  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      SceneObject obj;
      if (cfg.combo == ComboPolicy::kRequireHeldOut && i == 0) {
        obj.shape = kHeldOutShape;
        obj.color = kHeldOutColor;
      } else {
        obj.shape = static_cast<ShapeType>(rng.below(kNumShapes));
        std::vector<int> free;
        for (int c = 0; c < kNumColors; ++c) {
          if (!color_used[static_cast<std::size_t>(c)]) free.push_back(c);
        }
        obj.color = free[rng.below(free.size())];
        if (cfg.combo != ComboPolicy::kAny && is_held_out(obj.shape, obj.color)) continue;
      }
      obj.size = static_cast<int>(rng.range(cfg.min_size, cfg.max_size));
      const int dir = cfg.frames == 1 || cfg.max_speed == 0 ? 0 : static_cast<int>(rng.below(5));
      const int speed = dir == 0 ? 0 : static_cast<int>(rng.range(1, cfg.max_speed));
      static constexpr int kDx[5] = {0, 1, -1, 0, 0};
      static constexpr int kDy[5] = {0, 0, 0, 1, -1};
      obj.vx = kDx[dir] * speed;
      obj.vy = kDy[dir] * speed;
      int xlo, xhi, ylo, yhi;
      if (!start_range(cfg.width, obj.size, obj.vx, cfg.frames, xlo, xhi) ||
          !start_range(cfg.height, obj.size, obj.vy, cfg.frames, ylo, yhi)) {
        continue;
      }
      obj.x = static_cast<int>(rng.range(xlo, xhi));
      obj.y = static_cast<int>(rng.range(ylo, yhi));
      bool ok = true;
      for (const SceneObject& other : prog.objects) ok = ok && separated(obj, other, cfg.frames);
      if (!ok) continue;
      color_used[static_cast<std::size_t>(obj.color)] = true;
      prog.objects.push_back(obj);
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("generate_scene: could not place object " + std::to_string(i) +
                               " for seed " + std::to_string(seed));
    }
  }
  return prog;
}

FrameStack rasterize(const SceneProgram& prog) {
  FrameStack frames(prog.frames, prog.height, prog.width);
  for (int t = 0; t < prog.frames; ++t) {
    for (const SceneObject& obj : prog.objects) {
      const Rgb8 rgb = palette()[static_cast<std::size_t>(obj.color)];
      const float c[3] = {rgb.r / 255.0f, rgb.g / 255.0f, rgb.b / 255.0f};
      const int x0 = obj.x + obj.vx * t;
      const int y0 = obj.y + obj.vy * t;
      for (int v = 0; v < obj.size; ++v) {
        for (int u = 0; u < obj.size; ++u) {
          if (!covers(obj.shape, obj.size, u, v)) continue;
          for (int ch = 0; ch < 3; ++ch) frames.at(t, y0 + v, x0 + u, ch) = c[ch];
        }
      }
    }
  }
  return frames;
}

namespace {

std::string region_phrase(const SceneObject& o, const SceneProgram& p) {
  const int col = std::min(2, (2 * o.x + o.size) * 3 / (2 * p.width));
  const int row = std::min(2, (2 * o.y + o.size) * 3 / (2 * p.height));
  static const char* kNames[3][3] = {{"top left", "top", "top right"},
                                     {"left", "center", "right"},
                                     {"bottom left", "bottom", "bottom right"}};
  return kNames[row][col];
}

std::string motion_phrase(const SceneObject& o) {
  if (o.vx > 0) return "moves right";
  if (o.vx < 0) return "moves left";
  if (o.vy > 0) return "moves down";
  if (o.vy < 0) return "moves up";
  return "stays still";
}

std::string size_word(const SceneObject& o, const SceneProgram& p) {
  return 5 * o.size < std::min(p.height, p.width) ? "small" : "large";
}

const char* count_word(std::size_t n) {
  static const char* kWords[] = {"zero", "one", "two", "three", "four",
                                 "five", "six", "seven", "eight"};
  return n < 9 ? kWords[n] : "many";
}

}  // namespace

std::vector<std::string> instance_caption(const SceneObject& o, const SceneProgram& p) {
  const std::string color = color_name(o.color);
  const std::string shape = shape_name(o.shape);
  const std::string region = region_phrase(o, p);
  const std::string motion = motion_phrase(o);
  const std::string size = size_word(o, p);
  return {
      "a " + size + " " + color + " " + shape + " in the " + region + " " + motion,
      "the " + color + " " + shape + " is " + size,
      "the " + color + " " + shape + " starts in the " + region,
      "the " + color + " object " + motion,
  };
}

std::vector<std::string> global_caption(const SceneProgram& p) {
  std::string motions;
  std::string looks;
  for (const SceneObject& o : p.objects) {
    if (!motions.empty()) {
      motions += " and ";
      looks += " and ";
    }
    motions += "a " + color_name(o.color) + " " + shape_name(o.shape) + " " + motion_phrase(o);
    looks += "a " + size_word(o, p) + " " + color_name(o.color) + " " + shape_name(o.shape);
  }
  const std::size_t n = p.objects.size();
  return {
      motions,
      std::string("the scene has ") + count_word(n) + (n == 1 ? " object" : " objects"),
      looks,
  };
}

Sample render_sample(const SceneProgram& p, std::string sample_id) {
  Sample s;
  s.sample_id = sample_id.empty() ? "scene-" + std::to_string(p.seed) : std::move(sample_id);
  s.kind = p.frames == 1 ? SampleKind::kImage : SampleKind::kVideo;
  s.frames = rasterize(p);
  s.global_caption = global_caption(p);
  s.source_id = p.seed;
  for (std::size_t i = 0; i < p.objects.size(); ++i) {
    const SceneObject& o = p.objects[i];
    InstanceAnnotation inst;
    inst.instance_id = static_cast<int>(i);
    for (int t = 0; t < p.frames; ++t) {
      inst.trajectory.push_back(Box{t, o.x + o.vx * t, o.y + o.vy * t, o.size, o.size});
    }
    inst.caption = instance_caption(o, p);
    s.instances.push_back(std::move(inst));
  }
  return s;
}

Vocab shapes_world_vocab() {
  std::vector<std::string> words = {"a",     "the",    "and",   "in",     "is",    "has",
                                    "starts", "moves", "stays", "still",  "object", "objects",
                                    "scene", "small",  "large", "circle", "square", "triangle",
                                    "top",   "bottom", "left",  "right",  "center", "up",
                                    "down",  "zero",   "one",   "two",    "three", "four",
                                    "five",  "six",    "seven", "eight",  "many"};
  for (int c = 0; c < kNumColors; ++c) words.push_back(color_name(c));
  return Vocab::from_words(words);
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kTest:
      return "test";
    case Split::kZero:
      return "zero";
  }
  return "train";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "zero") return Split::kZero;
  throw std::invalid_argument("unknown split: " + std::string(s));
}

std::uint64_t scene_seed(Split split, std::uint64_t data_seed, std::uint64_t index) {
  const std::uint64_t base = split == Split::kTrain  ? 0
                             : split == Split::kTest ? (std::uint64_t{1} << 61)
                                                     : (std::uint64_t{1} << 62);
  return base + (data_seed << 24) + (index & 0xFFFFFF);
}

std::vector<Sample> generate_split(Split split, int count, std::uint64_t data_seed,
                                   SceneConfig config, int threads) {
  if (count < 0) throw std::invalid_argument("generate_split: negative count");
  config.combo = split == Split::kZero ? ComboPolicy::kRequireHeldOut : ComboPolicy::kExcludeHeldOut;
  std::vector<Sample> out(static_cast<std::size_t>(count));
  parallel_for(count, threads, [&](int i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%s-%06d", std::string(to_string(split)).c_str(), i);
    const auto seed = scene_seed(split, data_seed, static_cast<std::uint64_t>(i));
    out[static_cast<std::size_t>(i)] = render_sample(generate_scene(seed, config), id);
  });
  return out;
}

}  // namespace instap
