// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the forward value and a closure that pushes the output gradient back
// into the op's inputs. Tape::backward walks nodes in reverse creation order,
// which is a valid topological order because inputs always precede outputs.
//
// Nodes that do not depend on any trainable leaf record no closure, so a tape
// built with grad_enabled = false (or over constants only) costs no more than a
// plain forward pass.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "instap/tensor.hpp"

namespace instap::ad {

class Tape;

/// Handle to one node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  /// Accumulated gradient; empty (0×0) unless has_grad().
  const Matrix& grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Value of a 1×1 node.
  double scalar() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  friend bool operator==(const Var& a, const Var& b) {
    return a.tape_ == b.tape_ && a.id_ == b.id_;
  }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient flowing into an op's output.
  using BackwardFn = std::function<void(const Matrix& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value);
  Var scalar(double value);
  /// Leaf that receives a gradient (when the tape has gradients enabled).
  Var leaf(Matrix value);

  /// Appends an op node. The backward closure is kept only when at least one
  /// input requires a gradient.
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  /// Adds g into v's gradient; no-op when v does not require one.
  void accumulate(const Var& v, const Matrix& g);

  /// Seeds d(root)/d(root) = 1 and propagates. root must be 1×1.
  void backward(const Var& root);

 private:
  friend class Var;
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// ---- element-wise and shape ops -------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (r×c) + row (1×c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double c);
/// a * s for a 1×1 node s.
Var scale_by(const Var& a, const Var& s);
/// a / s for a 1×1 node s.
Var div_by(const Var& a, const Var& s);
Var exp(const Var& a);
Var sigmoid(const Var& a);
/// tanh-approximated GELU.
Var gelu(const Var& a);

Var matmul(const Var& a, const Var& b);
/// a * bᵀ
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var sum(const Var& a);
Var sum_squares(const Var& a);
/// Column means, 1×c.
Var mean_rows(const Var& a);

Var slice_rows(const Var& a, Index begin, Index count);
Var slice_cols(const Var& a, Index begin, Index count);
Var gather_rows(const Var& a, std::span<const Index> rows);
Var concat_rows(std::span<const Var> parts);

/// Row-wise L2 normalisation. Throws std::domain_error on a zero row.
Var l2_normalize_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var softmax_rows(const Var& a);

/// Scaled dot-product attention with `heads` heads over the column split of
/// q/k/v. key_valid (size = k.rows()) excludes keys from every query's
/// softmax. When probs_out is non-null it receives the head-averaged
/// attention probabilities, queries × keys.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads,
                         const std::vector<bool>* key_valid = nullptr,
                         Matrix* probs_out = nullptr);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace instap::ad
