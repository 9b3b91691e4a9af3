// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training driver.
//
// Stage 1 (pretrain) trains student.* to regress the frozen teacher's
// features on the tokens left visible by attention-guided masking. Stage 2
// (align) trains everything except the grounding head on the weighted sum of
// the global and instance objectives; the video encoder may start from a
// stage-1 checkpoint.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instap/config.hpp"
#include "instap/losses.hpp"
#include "instap/model.hpp"
#include "instap/optim.hpp"

namespace instap {

// ---- batch preparation -----------------------------------------------------

/// Keeps `frames` evenly spaced frames (floor(i·T/frames)); clips with fewer
/// frames are returned unchanged. Boxes on dropped frames are removed, the
/// rest re-indexed, and instances left without boxes are dropped.
Sample clip_sample(const Sample& sample, int frames);

/// Seed of the caption-cycling stream for one caption; instance_id −1 is the
/// global caption.
std::uint64_t caption_stream_seed(std::uint64_t data_seed, std::string_view sample_id, int instance_id);

/// With sub-sampling, the cycled sentence for `epoch`; without, every
/// sentence joined by spaces (and later truncated by the tokenizer).
std::string caption_text(std::span<const std::string> caption, int epoch, std::uint64_t stream_seed,
                         bool subsampling);

/// Token ids of every caption an align step will read.
struct BatchText {
  std::vector<std::vector<int>> global;            // per sample
  std::vector<std::vector<std::vector<int>>> inst;  // per sample, per instance
};
BatchText batch_text(std::span<const Sample* const> batch, const Vocab& vocab, const TrainConfig& config,
                     int epoch);

// ---- objectives --------------------------------------------------------------

/// The stage objective on `bind`'s tape. `total` is the weighted scalar that
/// is backpropagated; `components` are the unweighted values.
struct Objective {
  ad::Var total;
  LossComponents components;
};

/// Mean rec over the batch.
Objective pretrain_objective(Bindings& bind, const model::ModelState& state,
                             std::span<const Sample* const> batch, const TrainConfig& config);

/// Global VTC/VTM/MLM, plus the instance terms when any instance weight is
/// positive (and rec when keep_rec_in_align). Randomness (hard negatives,
/// MLM masks) comes only from `rng`; global draws precede instance draws.
/// Instance terms are 0 for a batch without instances.
Objective align_objective(Bindings& bind, const model::ModelState& state,
                          std::span<const Sample* const> batch, const BatchText& text,
                          const TrainConfig& config, Rng& rng);

/// Whether `name` is updated in `stage`: student.* in pretrain; everything
/// except head.ground.* in align.
bool trainable_in_stage(std::string_view name, Stage stage);

AdamWConfig adamw_config(const TrainConfig& config);

/// Clamps temp.* log-temperatures into [log kMinTemperature, log kMaxTemperature].
void clamp_temperatures(ParamStore& params);

// ---- steps ---------------------------------------------------------------------

/// One optimizer update on the stage objective. LossReport.step is the
/// optimizer step after the update.
LossReport pretrain_step(model::ModelState& state, OptState& opt, std::span<const Sample* const> batch,
                         const TrainConfig& config, double lr);
LossReport align_step(model::ModelState& state, OptState& opt, std::span<const Sample* const> batch,
                      const BatchText& text, const TrainConfig& config, double lr, Rng& rng);

// ---- gradient check --------------------------------------------------------------

struct GradCheckOptions {
  std::size_t coords_per_tensor = 200;  // all coordinates when the tensor is smaller
  double step = 1e-5;
  /// Relative error is |a − n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t coords_checked = 0;
};

/// Builds the loss on a fresh tape per evaluation, so `loss` must be a pure
/// function of the bound parameters. Every tensor of `params` is probed.
GradCheckResult grad_check(const std::function<ad::Var(Bindings&)>& loss, ParamStore params,
                           const GradCheckOptions& options = {});

// ---- trainer ------------------------------------------------------------------------

struct TrainerPaths {
  /// Step log (JSON lines); empty = none.
  std::filesystem::path log;
  /// Directory for final.iapt and, in pretrain, best.iapt; empty = none.
  std::filesystem::path checkpoints;
};

struct TrainResult {
  model::ModelState state;
  OptState opt;
  std::vector<LossReport> reports;
  /// Pretrain: mean rec of the window that produced best.iapt.
  std::optional<double> best_rec;
};

/// Steps per epoch = floor(|data| / B); each epoch's order is a shuffle
/// seeded by (data seed, epoch). `data` is clipped to frames_per_clip.
/// Throws ConfigError when the data cannot fill one batch.
TrainResult train(const TrainConfig& config, const std::vector<Sample>& data, const Vocab& vocab,
                  model::ModelState initial, const TrainerPaths& paths = {},
                  const std::function<void(const LossReport&)>& on_step = {});

/// The initial state for `config`: fresh from seeds.init, or the stage-1
/// hand-off when init_checkpoint is set. Throws std::filesystem::filesystem_error
/// naming the path when that checkpoint does not exist.
model::ModelState initial_state(const TrainConfig& config);

std::int64_t total_steps(const TrainConfig& config, std::size_t dataset_size);

}  // namespace instap
