// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval and grounding evaluation.
//
// Similarity matrices are texts × visuals. Text-to-video (T2V) ranks the
// visual columns of each text row; video-to-text (V2T) ranks the text rows of
// each visual column. Ties go to the lower candidate index.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instap/geometry.hpp"
#include "instap/model.hpp"
#include "instap/schema.hpp"

namespace instap {

inline constexpr std::array<int, 3> kRecallKs = {1, 5, 10};

struct RetrievalResult {
  std::string split;  // "global" or "instance"
  Matrix similarity;
  std::array<double, 3> t2v{};  // R@1, R@5, R@10 in [0, 1]
  std::array<double, 3> v2t{};
  double mean_recall = 0.0;
  /// Number of candidates per query (the pool size).
  Index pool_size = 0;
  /// True when some K exceeded the pool; such R@K are 1 by convention.
  bool k_exceeds_pool = false;
  /// Number of pools averaged (1 unless a pool size was requested).
  int pools = 1;
};

/// Position of `gt` in `scores` ranked by descending value, ties by index.
std::size_t rank_of(std::span<const double> scores, std::size_t gt);

/// sim is square; text q's match is visual gt[q], and gt must be a
/// permutation. Throws std::invalid_argument otherwise.
RetrievalResult retrieval_metrics(const Matrix& sim, std::span<const Index> gt);

/// Same, with separate score matrices per direction (both texts × visuals),
/// as produced by re-ranking.
RetrievalResult retrieval_metrics(const Matrix& t2v_scores, const Matrix& v2t_scores,
                                  std::span<const Index> gt);

struct EvalOptions {
  int frames_per_clip = 4;
  /// 0 = one pool over everything; otherwise consecutive pools of this many
  /// pairs (remainder dropped) with metrics averaged over pools.
  int pool_size = 0;
  /// Re-rank the top k candidates per query by matching probability; 0 = off.
  int rerank_top_k = 0;
  int threads = 1;
};

/// Projected, unit-norm embeddings of one retrieval split.
struct Embeddings {
  Matrix visual;  // n × d'
  Matrix text;    // n × d'
  std::vector<std::uint64_t> sources;
  /// Token ids of each text (sentence 0) and the visual sequence it is
  /// matched against, kept for re-ranking.
  std::vector<std::vector<int>> ids;
  std::vector<Matrix> visual_tokens;
};

/// One pair per sample: pooled video and sentence 0 of the global caption.
Embeddings global_embeddings(const model::ModelState& state, std::span<const Sample> samples,
                             const Vocab& vocab, const EvalOptions& options);
/// One pair per instance: cross-attended crop embedding and sentence 0 of
/// the instance caption. visual_tokens holds the pooled crop c (1 × d).
Embeddings instance_embeddings(const model::ModelState& state, std::span<const Sample> samples,
                               const Vocab& vocab, const EvalOptions& options);

/// Throws std::invalid_argument for an empty dataset.
RetrievalResult eval_global_retrieval(const model::ModelState& state, std::span<const Sample> samples,
                                      const Vocab& vocab, const EvalOptions& options = {});
/// Throws std::invalid_argument when the instances come from fewer than two
/// sources (or there are none).
RetrievalResult eval_instance_retrieval(const model::ModelState& state, std::span<const Sample> samples,
                                        const Vocab& vocab, const EvalOptions& options = {});

/// {split, pool_size, pools, metrics{...}, k_exceeds_pool, seed, checkpoint}.
std::string retrieval_json(const RetrievalResult& result, std::uint64_t seed, const std::string& checkpoint);

/// Header plus one row per JSON document (one document per line or a JSON
/// array): method, split, six recalls ×100, mean recall ×100.
std::string retrieval_csv(std::span<const std::string> json_documents, std::span<const std::string> methods);

// ---- grounding -------------------------------------------------------------

struct GroundingConfig {
  int steps = 300;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  /// Train the whole network instead of head.ground.* only.
  bool unfrozen = false;
  int frames_per_clip = 4;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct FramePrediction {
  NormBox predicted;
  Box target;
  double iou = 0.0;
};

struct GroundingPrediction {
  std::string sample_id;
  int instance_id = 0;
  std::vector<FramePrediction> frames;
  /// Mean IoU over the annotated frames.
  double score = 0.0;
};

/// Per-instance loss: Σ over annotated frames of mean|pred − target| +
/// (1 − GIoU), pred = ground_box(fused [CLS] of (frame tokens, caption)).
/// Returns the mean over the given instances.
ad::Var grounding_loss(Bindings& bind, const model::ModelState& state, const Sample& sample,
                       std::span<const std::size_t> instances, const Vocab& vocab);

/// Fine-tunes head.ground.* (or everything when unfrozen) on every instance
/// of `samples`; returns the per-step mean loss. Throws std::invalid_argument
/// when no instance exists.
std::vector<double> grounding_finetune(model::ModelState& state, std::span<const Sample> samples,
                                       const Vocab& vocab, const GroundingConfig& config);

std::vector<GroundingPrediction> grounding_predict(const model::ModelState& state, std::span<const Sample> samples,
                                                   const Vocab& vocab, const GroundingConfig& config);

/// Fraction of instance scores ≥ each threshold. Throws
/// std::invalid_argument for an empty list.
std::vector<double> grounding_metrics(std::span<const double> scores,
                                      std::span<const double> thresholds = std::array<double, 3>{0.5, 0.7, 0.9});

std::string grounding_json(std::span<const GroundingPrediction> preds, std::span<const double> thresholds,
                           std::uint64_t seed, const std::string& checkpoint);

}  // namespace instap
