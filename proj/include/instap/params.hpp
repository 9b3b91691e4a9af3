// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "instap/autodiff.hpp"
#include "instap/tensor.hpp"

namespace instap {

/// Named parameter tensors, ordered by name so iteration (and therefore
/// serialisation and optimizer traversal) is deterministic.
class ParamStore {
 public:
  using Map = std::map<std::string, Matrix, std::less<>>;

  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
  const Matrix& at(std::string_view name) const;
  Matrix& at(std::string_view name);
  void set(std::string name, Matrix value) { tensors_[std::move(name)] = std::move(value); }

  const Map& tensors() const { return tensors_; }
  Map& tensors() { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  /// Total scalar count.
  std::size_t scalar_count() const;
  std::vector<std::string> names_with_prefix(std::string_view prefix) const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  Map tensors_;
};

using GradMap = std::map<std::string, Matrix, std::less<>>;

/// Binds ParamStore tensors onto one Tape. Each name is bound at most once,
/// so every use of a parameter within a forward pass shares a single node and
/// gradients from all uses accumulate there.
class Bindings {
 public:
  Bindings(ad::Tape& tape, const ParamStore& store, bool trainable)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  ad::Var operator()(std::string_view name);
  ad::Tape& tape() const { return *tape_; }
  const std::map<std::string, ad::Var, std::less<>>& bound() const { return bound_; }

  /// Gradients of every bound parameter that the last backward pass reached.
  GradMap gradients() const;

 private:
  ad::Tape* tape_;
  const ParamStore* store_;
  bool trainable_;
  std::map<std::string, ad::Var, std::less<>> bound_;
};

}  // namespace instap
