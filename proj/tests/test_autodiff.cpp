// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "fd_check.hpp"
#include "instap/autodiff.hpp"
#include "instap/params.hpp"

using namespace instap;
using instap::testing::fd_max_rel_error;
using instap::testing::random_matrix;
using instap::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-6;

std::vector<Matrix> randoms(std::uint64_t seed, std::initializer_list<std::pair<Index, Index>> shapes,
                            double scale = 1.0) {
  Rng rng(seed);
  std::vector<Matrix> out;
  for (auto [r, c] : shapes) out.push_back(random_matrix(rng, r, c, scale));
  return out;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  auto in = randoms(1, {{3, 4}, {3, 4}});
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(x[0] + x[1], 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(x[0] - x[1], 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::mul(x[0], x[1]), 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::exp(x[0]), 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::sigmoid(x[0]), 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::gelu(x[0]), 7); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(x[0] * 2.5, 7); }, in) < kTol);
}

TEST_CASE("scalar broadcast ops match finite differences") {
  auto in = randoms(2, {{3, 4}, {1, 1}, {1, 4}});
  in[1](0, 0) = 1.7;
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::scale_by(x[0], x[1]), 3); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::div_by(x[0], x[1]), 3); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::add_row(x[0], x[2]), 3); }, in) < kTol);
}

TEST_CASE("matrix and shape ops match finite differences") {
  auto in = randoms(3, {{3, 4}, {4, 5}, {2, 4}});
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::matmul(x[0], x[1]), 5); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::matmul_nt(x[0], x[2]), 5); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::transpose(x[0]), 5); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return ad::sum(x[0]); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return ad::sum_squares(x[0]); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::mean_rows(x[0]), 5); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::slice_rows(x[0], 1, 2), 5); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::slice_cols(x[1], 2, 3), 5); }, in) < kTol);
  CHECK(fd_max_rel_error(
            [](ad::Tape&, const auto& x) {
              const std::vector<Index> rows{2, 0, 2};
              return weighted_sum(ad::gather_rows(x[0], rows), 5);
            },
            in) < kTol);
  CHECK(fd_max_rel_error(
            [](ad::Tape&, const auto& x) {
              const std::vector<ad::Var> parts{x[0], x[2]};
              return weighted_sum(ad::concat_rows(parts), 5);
            },
            in) < kTol);
}

TEST_CASE("normalisation ops match finite differences") {
  auto in = randoms(4, {{3, 6}, {1, 6}, {1, 6}});
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::l2_normalize_rows(x[0]), 9); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::softmax_rows(x[0]), 9); }, in) < kTol);
  CHECK(fd_max_rel_error([](ad::Tape&, const auto& x) { return weighted_sum(ad::layer_norm(x[0], x[1], x[2]), 9); }, in) < kTol);
}

TEST_CASE("multi-head attention matches finite differences") {
  auto in = randoms(5, {{3, 8}, {5, 8}, {5, 8}});
  CHECK(fd_max_rel_error(
            [](ad::Tape&, const auto& x) { return weighted_sum(ad::multi_head_attention(x[0], x[1], x[2], 2), 11); },
            in) < kTol);
  const std::vector<bool> valid{true, false, true, true, false};
  CHECK(fd_max_rel_error(
            [&](ad::Tape&, const auto& x) {
              return weighted_sum(ad::multi_head_attention(x[0], x[1], x[2], 4, &valid), 11);
            },
            in) < kTol);
}

TEST_CASE("attention probabilities are row-stochastic and respect the key mask") {
  Rng rng(6);
  ad::Tape tape(false);
  auto q = tape.constant(random_matrix(rng, 4, 8));
  auto k = tape.constant(random_matrix(rng, 6, 8));
  const std::vector<bool> valid{true, true, false, true, false, true};
  Matrix probs;
  ad::multi_head_attention(q, k, k, 2, &valid, &probs);
  REQUIRE(probs.rows() == 4);
  REQUIRE(probs.cols() == 6);
  for (Index r = 0; r < 4; ++r) {
    CHECK(probs.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(probs(r, 2) == 0.0);
    CHECK(probs(r, 4) == 0.0);
  }
}

TEST_CASE("shared leaf accumulates gradient from every use") {
  ad::Tape tape;
  auto x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  auto y = ad::mul(x, x) + x * 2.0;
  tape.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("gradient-disabled tape records no gradients") {
  ad::Tape tape(false);
  auto x = tape.leaf(Matrix::Constant(2, 2, 1.0));
  CHECK_FALSE(x.requires_grad());
  auto y = ad::sum(ad::exp(x));
  tape.backward(y);
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("error paths") {
  ad::Tape tape;
  auto a = tape.leaf(Matrix::Ones(2, 3));
  auto b = tape.leaf(Matrix::Ones(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(tape.backward(a), std::invalid_argument);
  CHECK_THROWS_AS(ad::l2_normalize_rows(tape.constant(Matrix::Zero(1, 3))), std::domain_error);
  CHECK_THROWS_AS(ad::multi_head_attention(a, a, a, 2), std::invalid_argument);
}

TEST_CASE("bindings share one node per parameter") {
  ParamStore store;
  store.set("w", Matrix::Constant(1, 1, 2.0));
  store.set("unused", Matrix::Constant(1, 1, 5.0));
  ad::Tape tape;
  Bindings bind(tape, store, true);
  auto w1 = bind("w");
  auto w2 = bind("w");
  CHECK(w1 == w2);
  bind("unused");
  tape.backward(ad::mul(w1, w2));
  const GradMap g = bind.gradients();
  CHECK(g.size() == 1);
  CHECK(g.at("w")(0, 0) == doctest::Approx(4.0));
  CHECK_THROWS(bind("missing"));
}
