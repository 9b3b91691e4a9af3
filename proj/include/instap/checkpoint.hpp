// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all integers little-endian):
//
//   "IAPT"  u32 version  u64 manifest_bytes  manifest (JSON)  payload
//
// The manifest maps tensor name → {"dtype": "f64" | "f32", "shape": [r, c],
// "offset": byte offset into the payload}, plus a "__meta__" entry holding
// the model config, stage and optimizer step. Tensors are stored in name
// order: trainable parameters under their own names, teacher tensors
// (already "teacher.*"), and Adam moments under "opt.m.<name>" /
// "opt.v.<name>". Saving always writes f64 bit-for-bit, so save → load →
// save reproduces the file exactly; f32 tensors are widened on load.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "instap/config.hpp"
#include "instap/model.hpp"
#include "instap/optim.hpp"

namespace instap {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  model::ModelState state;
  OptState opt;
  Stage stage = Stage::kPretrain;
};

/// Writes to `<path>.tmp` and renames, so readers never see a partial file.
void save_checkpoint(const std::filesystem::path& path, const model::ModelState& state,
                     const OptState& opt, Stage stage);

/// Throws CheckpointError on a bad magic/version, truncation, malformed
/// manifest, or when tensors required by the stored config are missing (the
/// message lists them).
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stage-2 starting point: a fresh model from `init_seed` whose video encoder
/// (student.*) tensors are copied from `stage1`. Throws CheckpointError when
/// the encoder shapes disagree.
model::ModelState handoff_from_pretrain(const Checkpoint& stage1, const model::ModelConfig& config,
                                        std::uint64_t init_seed);

}  // namespace instap
