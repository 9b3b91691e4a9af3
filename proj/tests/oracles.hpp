// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations, written for clarity rather than
// speed. They share no code with the library.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "instap/tensor.hpp"

namespace instap::oracle {

/// −log(exp(l_pos) / Σ_{c ∈ kept} exp(l_c)) evaluated literally.
inline double nll_over(const std::vector<double>& kept_logits, double positive) {
  double denom = 0.0;
  for (double l : kept_logits) denom += std::exp(l);
  return -std::log(std::exp(positive) / denom);
}

/// Instance VTC by physically deleting same-source negatives from each
/// denominator list, in both directions.
inline double instance_vtc(const Matrix& z, const Matrix& s, const std::vector<std::uint64_t>& src,
                           double tau) {
  const Index n = z.rows();
  double v2t = 0.0;
  double t2v = 0.0;
  for (Index a = 0; a < n; ++a) {
    std::vector<double> row_kept;
    std::vector<double> col_kept;
    for (Index m = 0; m < n; ++m) {
      if (m != a && src[static_cast<std::size_t>(m)] == src[static_cast<std::size_t>(a)]) continue;
      row_kept.push_back(z.row(a).dot(s.row(m)) / tau);
      col_kept.push_back(s.row(a).dot(z.row(m)) / tau);
    }
    const double pos = z.row(a).dot(s.row(a)) / tau;
    v2t += nll_over(row_kept, pos);
    t2v += nll_over(col_kept, pos);
  }
  return v2t / static_cast<double>(n) + t2v / static_cast<double>(n);
}

/// Number of denominator terms per anchor under the same-source rule.
inline std::vector<int> denominator_sizes(const std::vector<std::uint64_t>& src) {
  std::vector<int> out;
  for (std::size_t a = 0; a < src.size(); ++a) {
    int count = 0;
    for (std::size_t m = 0; m < src.size(); ++m) count += (m == a || src[m] != src[a]) ? 1 : 0;
    out.push_back(count);
  }
  return out;
}

/// Rank of candidate `gt` after a full stable sort by descending score, ties
/// ordered by candidate index.
inline std::size_t full_sort_rank(const std::vector<double>& scores, std::size_t gt) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), gt) - order.begin());
}

/// Recall@k for queries = rows of sim, gt[q] the correct column.
inline double recall_at(const Matrix& sim, const std::vector<Index>& gt, std::size_t k) {
  std::size_t hits = 0;
  for (Index q = 0; q < sim.rows(); ++q) {
    std::vector<double> scores(sim.row(q).data(), sim.row(q).data() + sim.cols());
    hits += full_sort_rank(scores, static_cast<std::size_t>(gt[static_cast<std::size_t>(q)])) < k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

}  // namespace instap::oracle
