// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace instap {

AttentionMap attention_from_query_probs(const Matrix& probs) {
  return AttentionMap{probs.transpose()};
}

Index TokenMask::masked_count() const {
  return static_cast<Index>(std::count(masked.begin(), masked.end(), true));
}

std::vector<double> importance_scores(const AttentionMap& attention) {
  const Matrix& a = attention.weights;
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw std::invalid_argument("importance_scores: attention map must be square and non-empty");
  }
  const double inv = 1.0 / static_cast<double>(a.rows());
  std::vector<double> s(static_cast<std::size_t>(a.rows()));
  for (Index l = 0; l < a.rows(); ++l) s[static_cast<std::size_t>(l)] = a.row(l).sum() * inv;
  return s;
}

TokenMask build_mask(std::span<const double> scores, double rho, Index length) {
  if (!(rho >= 0.0 && rho < 1.0)) {
    throw std::invalid_argument("build_mask: rho must lie in [0, 1)");
  }
  if (static_cast<Index>(scores.size()) != length) {
    throw std::invalid_argument("build_mask: score count differs from token count");
  }
  // ceil(rho·L) computed so that exact products (0.8·10) are not pushed up by
  // rounding noise.
  const double product = rho * static_cast<double>(length);
  const auto n_masked = static_cast<Index>(std::ceil(product - 1e-9 * std::max(1.0, product)));

  std::vector<Index> order(static_cast<std::size_t>(length));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });

  TokenMask mask;
  mask.rho = rho;
  mask.masked.assign(static_cast<std::size_t>(length), false);
  for (Index i = 0; i < n_masked; ++i) mask.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  for (Index l = 0; l < length; ++l) {
    if (!mask.masked[static_cast<std::size_t>(l)]) mask.visible.push_back(l);
  }
  return mask;
}

namespace {

TokenSeq select_where(const TokenSeq& tokens, const TokenMask& mask, bool want_masked) {
  if (tokens.size() != mask.length() || tokens.data.rows() != mask.length()) {
    throw std::invalid_argument("select_visible: token count differs from mask length");
  }
  std::vector<Index> rows;
  TokenSeq out;
  for (Index l = 0; l < mask.length(); ++l) {
    if (mask.masked[static_cast<std::size_t>(l)] == want_masked) {
      rows.push_back(l);
      out.positions.push_back(tokens.positions[static_cast<std::size_t>(l)]);
    }
  }
  out.data = ad::gather_rows(tokens.data, rows);
  return out;
}

}  // namespace

TokenSeq select_visible(const TokenSeq& tokens, const TokenMask& mask) {
  return select_where(tokens, mask, false);
}

TokenSeq select_masked(const TokenSeq& tokens, const TokenMask& mask) {
  return select_where(tokens, mask, true);
}

}  // namespace instap
