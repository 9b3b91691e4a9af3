// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Each loss is a tape op (or a short composition of tape
// ops) so the step driver can sum them into one scalar and backpropagate once.
// The contrastive, cross-entropy and box kernels are fused with hand-written
// backward passes.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instap/autodiff.hpp"
#include "instap/rng.hpp"
#include "instap/schema.hpp"

namespace instap {

inline constexpr double kProbClamp = 1e-7;

// ---- kernels ----------------------------------------------------------------

/// Row-wise InfoNCE with the positive on the diagonal:
///   mean_i [ −l_ii + log Σ_{j : allowed(i,j)} exp(l_ij) ].
/// `allowed` is row-major n×n; null means all allowed. The diagonal must be
/// allowed. Requires a square input.
ad::Var info_nce_rows(const ad::Var& logits, const std::vector<bool>* allowed = nullptr);

/// mean_r −log max(softmax(logits_r)[target_r], kProbClamp).
ad::Var cross_entropy_rows(const ad::Var& logits, std::span<const int> targets);

/// mean −[y log p + (1 − y) log(1 − p)] with p clamped to [kProbClamp, 1 − kProbClamp].
/// `probs` is n×1.
ad::Var binary_cross_entropy(const ad::Var& probs, std::span<const int> labels);

/// pred and target are n×4 normalised (cx, cy, w, h). Per row the loss is
/// mean |pred − target| + (1 − GIoU); the result is the mean over rows.
ad::Var box_regression_loss(const ad::Var& pred, const Matrix& target);

// ---- objectives -------------------------------------------------------------

/// (1/|Ω|) Σ ‖hS_l/‖hS_l‖ − hT_l/‖hT_l‖‖² over l ∈ Ω. hs holds the visible
/// rows in Ω order; ht holds all L rows. Throws std::invalid_argument for an
/// empty Ω and std::domain_error for a zero vector.
ad::Var rec_loss(const ad::Var& hs, const ad::Var& ht, std::span<const Index> omega);

/// Sum of the two directional InfoNCE means over v·tᵀ/τ. tau is 1×1.
/// Throws std::invalid_argument when τ ≤ 0.
ad::Var vtc_loss(const ad::Var& v, const ad::Var& t, const ad::Var& tau);

/// VTC where the denominator of anchor n keeps m iff m = n or the sources
/// differ.
ad::Var instance_vtc_loss(const ad::Var& z, const ad::Var& s,
                          std::span<const std::uint64_t> source_ids, const ad::Var& tau);

/// allowed(n, m) = (n == m) || source_n != source_m, row-major.
std::vector<bool> same_source_mask(std::span<const std::uint64_t> source_ids);

struct HardNegatives {
  /// For video i, the negative text index, or −1 when no candidate exists.
  std::vector<Index> text_for_video;
  /// For text j, the negative video index, or −1.
  std::vector<Index> video_for_text;
};

/// sim is videos × texts. Row i draws j ≠ i with probability ∝ exp(sim_ij/τ);
/// column j draws i ≠ j likewise. `eligible` (row-major, optional) further
/// restricts candidates. Throws std::invalid_argument for B < 2 or τ ≤ 0.
HardNegatives mine_hard_negatives(const Matrix& sim, double tau, Rng& rng,
                                  const std::vector<bool>* eligible = nullptr);

/// Binary cross-entropy on softmax(logits)[:, 1]; logits are n×2.
ad::Var vtm_loss(const ad::Var& logits, std::span<const int> labels);

struct MaskedText {
  std::vector<int> ids;        // corrupted sequence
  std::vector<Index> positions;  // masked positions, ascending
  std::vector<int> targets;    // original ids at those positions
  bool forced = false;         // true when the Bernoulli draw selected nothing
};

/// Each non-special position is selected with probability `ratio`; if none
/// is, one uniformly chosen maskable position is. Selected ids become [MASK].
/// Throws std::invalid_argument when nothing is maskable.
MaskedText mask_text_tokens(std::span<const int> ids, double ratio, Rng& rng);

/// (1/B) Σ_i (1/|M_i|) Σ_{j∈M_i} −log p(target). logits[i] is text_len × V.
ad::Var mlm_loss(std::span<const ad::Var> logits, std::span<const MaskedText> masks);

// ---- composition ------------------------------------------------------------

struct LossWeights {
  double vtc = 1.0;
  double vtm = 1.0;
  double mlm = 1.0;
  double vtc_inst = 0.1;
  double vtm_inst = 0.1;
  double mlm_inst = 0.1;

  bool instance_enabled() const { return vtc_inst > 0.0 || vtm_inst > 0.0 || mlm_inst > 0.0; }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossComponents {
  double rec = 0.0;
  double vtc = 0.0;
  double vtm = 0.0;
  double mlm = 0.0;
  double vtc_inst = 0.0;
  double vtm_inst = 0.0;
  double mlm_inst = 0.0;
};

struct LossReport {
  double rec = 0.0;
  double vtc = 0.0;
  double vtm = 0.0;
  double mlm = 0.0;
  double vtc_inst = 0.0;
  double vtm_inst = 0.0;
  double mlm_inst = 0.0;
  double global_total = 0.0;
  double inst_total = 0.0;
  double total = 0.0;
  std::int64_t step = 0;
  double lr = 0.0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

/// Throws std::invalid_argument for negative or non-finite weights and
/// non-finite components.
LossReport total_loss(const LossComponents& components, const LossWeights& weights);

/// One JSON object, no trailing newline. Doubles round-trip exactly.
std::string to_json_line(const LossReport& report);
LossReport loss_report_from_json(const std::string& line);

}  // namespace instap
