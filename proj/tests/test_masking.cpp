// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fd_check.hpp"
#include "instap/masking.hpp"

using namespace instap;

namespace {

Matrix column_stochastic(Rng& rng, Index n) {
  Matrix a(n, n);
  for (Index j = 0; j < n; ++j) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) total += (a(i, j) = rng.uniform() + 1e-3);
    a.col(j) /= total;
  }
  return a;
}

TokenSeq make_tokens(ad::Tape& tape, Rng& rng, Index n) {
  TokenSeq seq;
  seq.data = tape.constant(testing::random_matrix(rng, n, 3));
  for (Index i = 0; i < n; ++i) seq.positions.push_back({static_cast<int>(i / 4), static_cast<int>(i % 4) / 2, static_cast<int>(i % 2)});
  return seq;
}

}  // namespace

TEST_CASE("importance scores of identity attention are uniform") {
  const auto s = importance_scores({Matrix::Identity(4, 4)});
  for (double v : s) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("importance scores are receiver-indexed row means") {
  Matrix a(2, 2);
  a << 0.5, 0.2, 0.5, 0.8;
  const auto s = importance_scores({a});
  CHECK(s[0] == doctest::Approx(0.35).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(0.65).epsilon(1e-12));
}

TEST_CASE("attention sink concentrates all importance on token 0") {
  Matrix a = Matrix::Zero(5, 5);
  a.row(0).setOnes();
  const auto s = importance_scores({a});
  CHECK(s[0] == doctest::Approx(1.0));
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] == 0.0);
}

TEST_CASE("query-row probabilities transpose into a column-stochastic map") {
  Rng rng(3);
  Matrix p = column_stochastic(rng, 6).transpose();
  const AttentionMap map = attention_from_query_probs(p);
  for (Index j = 0; j < 6; ++j) CHECK(map.weights.col(j).sum() == doctest::Approx(1.0));
  const auto s = importance_scores(map);
  CHECK(std::accumulate(s.begin(), s.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("non-square attention is rejected") {
  CHECK_THROWS_AS(importance_scores({Matrix::Ones(2, 3)}), std::invalid_argument);
}

TEST_CASE("importance scores are permutation-equivariant") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = static_cast<Index>(rng.range(2, 12));
    const Matrix a = column_stochastic(rng, n);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    rng.shuffle(std::span<Index>(perm));
    Matrix pa(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) pa(i, j) = a(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    const auto s = importance_scores({a});
    const auto ps = importance_scores({pa});
    for (Index i = 0; i < n; ++i) {
      CHECK(ps[static_cast<std::size_t>(i)] == doctest::Approx(s[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]).epsilon(1e-12));
    }
  }
}

TEST_CASE("build_mask at 80 percent keeps the two highest scores") {
  std::vector<double> s(10);
  for (int i = 0; i < 10; ++i) s[static_cast<std::size_t>(i)] = i / 45.0;
  const TokenMask m = build_mask(s, 0.8, 10);
  CHECK(m.masked_count() == 8);
  for (int i = 0; i < 8; ++i) CHECK(m.masked[static_cast<std::size_t>(i)]);
  CHECK(m.visible == std::vector<Index>{8, 9});
}

TEST_CASE("build_mask with rho zero masks nothing") {
  const std::vector<double> s{0.3, 0.1, 0.6};
  const TokenMask m = build_mask(s, 0.0, 3);
  CHECK(m.masked_count() == 0);
  CHECK(m.visible == std::vector<Index>{0, 1, 2});
}

TEST_CASE("ties are broken toward the lower index") {
  const std::vector<double> s(4, 0.25);
  const TokenMask m = build_mask(s, 0.5, 4);
  CHECK(m.masked == std::vector<bool>{true, true, false, false});
}

TEST_CASE("build_mask rejects invalid inputs") {
  const std::vector<double> s{0.5, 0.5};
  CHECK_THROWS_AS(build_mask(s, 1.0, 2), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(s, -0.1, 2), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(s, 0.5, 3), std::invalid_argument);
}

TEST_CASE("mask count equals ceil(rho L) across ratios and lengths") {
  Rng rng(21);
  for (double rho : {0.0, 0.25, 0.5, 0.8, 0.95}) {
    for (Index n = 1; n <= 64; ++n) {
      std::vector<double> s(static_cast<std::size_t>(n));
      for (auto& v : s) v = rng.uniform();
      const TokenMask m = build_mask(s, rho, n);
      // Oracle: exact rational ceil, with rho written as k/100.
      const auto k = static_cast<Index>(std::lround(rho * 100));
      const Index expected = (k * n + 99) / 100;
      CHECK(m.masked_count() == expected);
      CHECK(static_cast<Index>(m.visible.size()) == n - expected);
    }
  }
}

TEST_CASE("raising a masked score above the threshold unmasks it") {
  Rng rng(33);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = static_cast<Index>(rng.range(3, 20));
    std::vector<double> s(static_cast<std::size_t>(n));
    for (auto& v : s) v = rng.uniform();
    const TokenMask m = build_mask(s, 0.5, n);
    const auto it = std::find(m.masked.begin(), m.masked.end(), true);
    REQUIRE(it != m.masked.end());
    const auto idx = static_cast<std::size_t>(it - m.masked.begin());
    s[idx] = 2.0;
    CHECK_FALSE(build_mask(s, 0.5, n).masked[idx]);
  }
}

TEST_CASE("select_visible preserves order and positions") {
  Rng rng(4);
  ad::Tape tape(false);
  const TokenSeq tokens = make_tokens(tape, rng, 4);
  const TokenMask all = build_mask(std::vector<double>{1, 2, 3, 4}, 0.0, 4);
  const TokenSeq same = select_visible(tokens, all);
  CHECK(same.positions == tokens.positions);
  CHECK(same.data.value() == tokens.data.value());

  const TokenMask one = build_mask(std::vector<double>{0, 0, 0, 1}, 0.75, 4);
  const TokenSeq single = select_visible(tokens, one);
  REQUIRE(single.size() == 1);
  CHECK(single.positions[0] == tokens.positions[3]);
  CHECK(single.data.value().row(0) == tokens.data.value().row(3));
}

TEST_CASE("visible and masked partitions recover a permutation of the input") {
  Rng rng(8);
  for (int trial = 0; trial < 25; ++trial) {
    ad::Tape tape(false);
    const Index n = static_cast<Index>(rng.range(1, 24));
    const TokenSeq tokens = make_tokens(tape, rng, n);
    std::vector<double> s(static_cast<std::size_t>(n));
    for (auto& v : s) v = rng.uniform();
    const TokenMask m = build_mask(s, rng.uniform() * 0.95, n);
    const TokenSeq vis = select_visible(tokens, m);
    const TokenSeq hid = select_masked(tokens, m);
    CHECK(vis.size() + hid.size() == n);
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    auto mark = [&](const TokenSeq& part) {
      for (Index r = 0; r < part.size(); ++r) {
        for (Index i = 0; i < n; ++i) {
          if (tokens.positions[static_cast<std::size_t>(i)] == part.positions[static_cast<std::size_t>(r)] &&
              tokens.data.value().row(i) == part.data.value().row(r) && !seen[static_cast<std::size_t>(i)]) {
            seen[static_cast<std::size_t>(i)] = true;
            break;
          }
        }
      }
    };
    mark(vis);
    mark(hid);
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
  }
}

TEST_CASE("select_visible rejects a length mismatch") {
  Rng rng(5);
  ad::Tape tape(false);
  const TokenSeq tokens = make_tokens(tape, rng, 3);
  const TokenMask m = build_mask(std::vector<double>{1, 2, 3, 4}, 0.5, 4);
  CHECK_THROWS_AS(select_visible(tokens, m), std::invalid_argument);
}
