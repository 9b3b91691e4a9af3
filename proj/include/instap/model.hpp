// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Encoders, fusion transformer and heads.
//
// All modules are pre-LN transformer blocks without a final LayerNorm, so a
// block whose attention output projection and second MLP layer are zero is
// the identity. Parameters live in a ParamStore under stable dotted names:
//
//   student.*   video encoder being trained (patch embed, positions, blocks)
//   teacher.*   frozen copy of the student architecture (separate store)
//   text.*      text encoder
//   proj.*      video/text projections into the shared space, no bias
//   xattn.*     crop-to-scene cross-attention pooling
//   fusion.*    fusion transformer (self-attn, cross-attn to visual, MLP)
//   head.*      matching, MLM and grounding heads
//   temp.*      log-temperatures
//
// Every forward function resolves parameters through a Bindings object, so
// the global and instance paths of one step share the same tape nodes.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "instap/autodiff.hpp"
#include "instap/masking.hpp"
#include "instap/params.hpp"
#include "instap/schema.hpp"

namespace instap::model {

struct ModelConfig {
  int dim = 64;
  int proj_dim = 32;
  int encoder_layers = 2;
  int text_layers = 2;
  int fusion_layers = 2;
  int heads = 4;
  int patch = 8;
  int mlp_ratio = 4;
  int max_frames = 16;
  int max_grid = 8;
  int text_len = 16;
  int crop_h = 32;
  int crop_w = 32;
  int vocab_size = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws std::invalid_argument when the configuration is unusable.
void validate_config(const ModelConfig& config);

inline constexpr std::uint64_t kTeacherSeed = 0x7EAC4E2ULL;
inline constexpr double kInitTemperature = 0.07;
inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kMaxTemperature = 10.0;

struct ModelState {
  ModelConfig config;
  ParamStore params;
  ParamStore teacher;
};

/// Trainable parameters. Each tensor is drawn from its own stream seeded by
/// (seed, name), so re-initialising a subset reproduces the same values.
ParamStore init_params(const ModelConfig& config, std::uint64_t seed);
/// Frozen teacher, always seeded with kTeacherSeed.
ParamStore init_teacher(const ModelConfig& config);
ModelState init_model(const ModelConfig& config, std::uint64_t seed);

/// Names of the student video encoder tensors (the stage hand-off set).
std::vector<std::string> video_encoder_names(const ParamStore& params);
/// Copies teacher.* tensors onto student.*; the self-distillation fixed point.
void copy_teacher_into_student(ModelState& state);

/// False for biases, LayerNorm parameters, positional tables and temperatures.
bool applies_weight_decay(std::string_view name);

double temperature(const ParamStore& params, std::string_view name);

// ---- video -----------------------------------------------------------------

struct PatchGrid {
  Matrix patches;  // L × (P·P·3), rows ordered frame, row, col
  std::vector<TokenPos> positions;
};

/// Throws std::invalid_argument when H or W is not divisible by P.
PatchGrid extract_patches(const FrameStack& frames, int patch);

/// Linear patch embedding plus positional embedding of (frame, row, col).
/// `prefix` is "student" or "teacher".
TokenSeq patchify(Bindings& bind, std::string_view prefix, const FrameStack& frames,
                  const ModelConfig& config);

struct Encoded {
  TokenSeq tokens;
  ad::Var pooled;  // 1 × d
};

/// Encoder blocks over `tokens` (all attend to all) and the token mean.
/// `last_attention`, when given, receives the final block's head-averaged
/// query-row attention probabilities.
Encoded encode_video(Bindings& bind, std::string_view prefix, const TokenSeq& tokens,
                     const ModelConfig& config, Matrix* last_attention = nullptr);

struct TeacherOutput {
  Matrix features;  // L × d
  AttentionMap attention;
  std::vector<TokenPos> positions;
};

TeacherOutput teacher_features(const ModelState& state, const FrameStack& frames);

// ---- text ------------------------------------------------------------------

/// [PAD] keys are masked out; pooled = row 0 ([CLS]).
/// Throws std::out_of_range for ids outside the vocabulary.
Encoded encode_text(Bindings& bind, std::span<const int> ids, const ModelConfig& config);

// ---- shared space ----------------------------------------------------------

enum class Modality { kVisual, kText };

/// Row-wise l2_normalize(raw · W). Throws std::domain_error on a zero row.
ad::Var project(Bindings& bind, const ad::Var& raw, Modality which);

// ---- instances -------------------------------------------------------------

/// Bilinear resize (half-pixel centres) of each annotated frame's box to
/// crop_h × crop_w; one output frame per trajectory entry. Boxes are clamped
/// to the frame first. Throws std::invalid_argument on a degenerate box.
FrameStack crop_instance(const Sample& sample, const InstanceAnnotation& instance, int crop_h,
                         int crop_w);

/// Z = C + XAttn(LN(C), LN(V)); pooled = mean over Z.
Encoded cross_attend_pool(Bindings& bind, const TokenSeq& crop, const TokenSeq& scene,
                          const ModelConfig& config);

// ---- fusion and heads ------------------------------------------------------

struct Fused {
  ad::Var cls;     // 1 × d
  ad::Var logits;  // text_len × vocab, only when requested
};

/// Text encoder output refined by the fusion layers; text self-attends and
/// cross-attends to `visual` (Lv × d). use_cross = false drops the
/// cross-attention branch entirely.
Fused fuse(Bindings& bind, const ad::Var& visual, std::span<const int> ids,
           const ModelConfig& config, bool want_logits, bool use_cross = true);

/// n × 2 matching logits; class 1 = matched.
ad::Var match_logits(Bindings& bind, const ad::Var& cls);

/// n × 4 normalised (cx, cy, w, h), each in (0, 1).
ad::Var ground_box(Bindings& bind, const ad::Var& cls);

/// Rows of `tokens` on frame t.
TokenSeq frame_tokens(const TokenSeq& tokens, int t);

}  // namespace instap::model
