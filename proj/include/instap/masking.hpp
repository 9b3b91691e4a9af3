// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Attention-guided token masking for masked video modelling.
//
// Orientation: A(l, j) is the attention token j assigns to token l, so each
// column of A is one token's outgoing distribution and row sums measure the
// attention a token receives. Importance s = A·1 / L is therefore the mean
// attention received; the ceil(rho·L) lowest-importance tokens are masked.

#pragma once

#include <span>
#include <vector>

#include "instap/autodiff.hpp"
#include "instap/tensor.hpp"

namespace instap {

/// Position of a visual token: frame index and patch grid cell.
struct TokenPos {
  int frame = 0;
  int row = 0;
  int col = 0;

  friend bool operator==(const TokenPos&, const TokenPos&) = default;
};

/// L×d features plus per-token positions.
struct TokenSeq {
  ad::Var data;
  std::vector<TokenPos> positions;

  Index size() const { return static_cast<Index>(positions.size()); }
};

/// Receiver-indexed attention: weights(l, j) = attention token j gives to l.
struct AttentionMap {
  Matrix weights;
};

/// Builds the map from standard query-row softmax probabilities P (rows sum
/// to one) by transposing.
AttentionMap attention_from_query_probs(const Matrix& probs);

struct TokenMask {
  std::vector<bool> masked;       // size L, true = hidden from the student
  std::vector<Index> visible;     // ascending
  double rho = 0.0;

  Index length() const { return static_cast<Index>(masked.size()); }
  Index masked_count() const;
};

/// s_l = (1/L) Σ_j A(l, j). Throws std::invalid_argument for non-square A.
std::vector<double> importance_scores(const AttentionMap& attention);

/// Masks exactly ceil(rho·L) tokens with the smallest scores; ties go to the
/// lower token index first. Throws for rho outside [0, 1) or |s| != L.
/// For short sequences ceil(rho·L) can equal L; callers that need a visible
/// token (reconstruction) reject the empty visible set themselves.
TokenMask build_mask(std::span<const double> scores, double rho, Index length);

/// Visible tokens in original order, positions preserved.
TokenSeq select_visible(const TokenSeq& tokens, const TokenMask& mask);
/// Complement of select_visible.
TokenSeq select_masked(const TokenSeq& tokens, const TokenMask& mask);

}  // namespace instap
