// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace instap::ad {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::grad() const { return tape_->node(id_).grad; }
bool Var::has_grad() const { return tape_->node(id_).has_grad; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("Var::scalar on non-1x1 node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), grad_enabled_, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& in : inputs) needs = needs || in.requires_grad();
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs, false,
                        needs ? std::move(backward) : BackwardFn()});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = node(v.id());
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be 1x1");
  }
  if (!root.requires_grad()) return;
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(n.grad);
  }
}

// ---- element-wise --------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g) {
    a.tape().accumulate(a, g);
    if (b.requires_grad()) a.tape().accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) a.tape().accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) a.tape().accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x a.cols");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](const Matrix& g) {
    a.tape().accumulate(a, g);
    if (row.requires_grad()) a.tape().accumulate(row, g.colwise().sum());
  });
}

Var scale(const Var& a, double c) {
  return a.tape().record(a.value() * c, {a}, [a, c](const Matrix& g) {
    a.tape().accumulate(a, g * c);
  });
}

Var scale_by(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "scale_by: s must be 1x1");
  const double sv = s.scalar();
  return a.tape().record(a.value() * sv, {a, s}, [a, s, sv](const Matrix& g) {
    if (a.requires_grad()) a.tape().accumulate(a, g * sv);
    if (s.requires_grad()) {
      a.tape().accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
    }
  });
}

Var div_by(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "div_by: s must be 1x1");
  const double sv = s.scalar();
  return a.tape().record(a.value() / sv, {a, s}, [a, s, sv](const Matrix& g) {
    if (a.requires_grad()) a.tape().accumulate(a, g / sv);
    if (s.requires_grad()) {
      const double d = -g.cwiseProduct(a.value()).sum() / (sv * sv);
      a.tape().accumulate(s, Matrix::Constant(1, 1, d));
    }
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved](const Matrix& g) {
    a.tape().accumulate(a, g.cwiseProduct(saved));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved](const Matrix& g) {
    a.tape().accumulate(a, (g.array() * saved.array() * (1.0 - saved.array())).matrix());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    const Matrix& x = a.value();
    Matrix dx(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx.data()[i] = g.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
    a.tape().accumulate(a, dx);
  });
}

// ---- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  return a.tape().record(a.value() * b.value(), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) a.tape().accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) a.tape().accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  return a.tape().record(a.value() * b.value().transpose(), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) a.tape().accumulate(a, g * b.value());
    if (b.requires_grad()) a.tape().accumulate(b, g.transpose() * a.value());
  });
}

Var transpose(const Var& a) {
  return a.tape().record(a.value().transpose(), {a}, [a](const Matrix& g) {
    a.tape().accumulate(a, g.transpose());
  });
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
  return a.tape().record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](const Matrix& g) {
    a.tape().accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var sum_squares(const Var& a) {
  return a.tape().record(Matrix::Constant(1, 1, a.value().squaredNorm()), {a},
                         [a](const Matrix& g) { a.tape().accumulate(a, a.value() * (2.0 * g(0, 0))); });
}

Var mean_rows(const Var& a) {
  require(a.rows() > 0, "mean_rows: empty input");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum() * inv;
  return a.tape().record(std::move(out), {a}, [a, inv](const Matrix& g) {
    Matrix d(a.rows(), a.cols());
    d.rowwise() = g.row(0) * inv;
    a.tape().accumulate(a, d);
  });
}

// ---- slicing ---------------------------------------------------------------

Var slice_rows(const Var& a, Index begin, Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  return a.tape().record(a.value().middleRows(begin, count), {a},
                         [a, begin, count](const Matrix& g) {
                           Matrix d = Matrix::Zero(a.rows(), a.cols());
                           d.middleRows(begin, count) = g;
                           a.tape().accumulate(a, d);
                         });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols: out of range");
  return a.tape().record(a.value().middleCols(begin, count), {a},
                         [a, begin, count](const Matrix& g) {
                           Matrix d = Matrix::Zero(a.rows(), a.cols());
                           d.middleCols(begin, count) = g;
                           a.tape().accumulate(a, d);
                         });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  std::vector<Index> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return a.tape().record(std::move(out), {a}, [a, idx](const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
    a.tape().accumulate(a, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index total = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts.front().tape().record(std::move(out), parts, [saved](const Matrix& g) {
    Index at = 0;
    for (const Var& p : saved) {
      if (p.requires_grad()) p.tape().accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

// ---- normalisation ---------------------------------------------------------

Var l2_normalize_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  std::vector<double> norms(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (!(n > 0.0)) throw std::domain_error("l2_normalize_rows: zero-norm row");
    norms[static_cast<std::size_t>(r)] = n;
    out.row(r) = x.row(r) / n;
  }
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved, norms](const Matrix& g) {
    Matrix d(saved.rows(), saved.cols());
    for (Index r = 0; r < saved.rows(); ++r) {
      const double proj = saved.row(r).dot(g.row(r));
      d.row(r) = (g.row(r) - saved.row(r) * proj) / norms[static_cast<std::size_t>(r)];
    }
    a.tape().accumulate(a, d);
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
          "layer_norm: gain/bias must be 1 x d");
  Matrix xhat(n, d);
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    const auto centered = x.value().row(r).array() - mu;
    const double var = centered.square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (centered * is).matrix();
  }
  Matrix out = xhat;
  for (Index r = 0; r < n; ++r) {
    out.row(r) = (xhat.row(r).array() * gain.value().row(0).array() + bias.value().row(0).array())
                     .matrix();
  }
  return x.tape().record(
      std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](const Matrix& g) {
        Tape& tape = x.tape();
        if (gain.requires_grad()) tape.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
        if (!x.requires_grad()) return;
        Matrix dx(xhat.rows(), xhat.cols());
        const double inv_d = 1.0 / static_cast<double>(xhat.cols());
        for (Index r = 0; r < xhat.rows(); ++r) {
          const Eigen::RowVectorXd dxhat =
              (g.row(r).array() * gain.value().row(0).array()).matrix();
          const double m1 = dxhat.sum() * inv_d;
          const double m2 = dxhat.dot(xhat.row(r)) * inv_d;
          dx.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix() *
                      inv_std[static_cast<std::size_t>(r)];
        }
        tape.accumulate(x, dx);
      });
}

namespace {

void softmax_row_inplace(Eigen::Ref<Eigen::RowVectorXd> row, const std::vector<bool>* valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < row.size(); ++j) {
    if (valid && !(*valid)[static_cast<std::size_t>(j)]) continue;
    mx = std::max(mx, row(j));
  }
  double total = 0.0;
  for (Index j = 0; j < row.size(); ++j) {
    if (valid && !(*valid)[static_cast<std::size_t>(j)]) {
      row(j) = 0.0;
      continue;
    }
    row(j) = std::exp(row(j) - mx);
    total += row(j);
  }
  row /= total;
}

}  // namespace

Var softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    Eigen::RowVectorXd row = out.row(r);
    softmax_row_inplace(row, nullptr);
    out.row(r) = row;
  }
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved](const Matrix& g) {
    Matrix d(saved.rows(), saved.cols());
    for (Index r = 0; r < saved.rows(); ++r) {
      const double dot = g.row(r).dot(saved.row(r));
      d.row(r) = (saved.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    a.tape().accumulate(a, d);
  });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads,
                         const std::vector<bool>* key_valid, Matrix* probs_out) {
  const Index d = q.cols();
  require(heads > 0 && d % heads == 0, "attention: dim not divisible by heads");
  require(k.cols() == d && v.cols() == d && k.rows() == v.rows(), "attention: shape mismatch");
  if (key_valid) {
    require(static_cast<Index>(key_valid->size()) == k.rows(), "attention: key mask size");
  }
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index lq = q.rows();
  const Index lk = k.rows();

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(heads));
  Matrix out(lq, d);
  if (probs_out) *probs_out = Matrix::Zero(lq, lk);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix p = (qh * kh.transpose()) * scale;
    for (Index r = 0; r < lq; ++r) {
      Eigen::RowVectorXd row = p.row(r);
      softmax_row_inplace(row, key_valid);
      p.row(r) = row;
    }
    out.middleCols(h * dh, dh) = p * vh;
    if (probs_out) *probs_out += p / static_cast<double>(heads);
    (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }

  return q.tape().record(
      std::move(out), {q, k, v}, [q, k, v, heads, dh, scale, probs](const Matrix& g) {
        Tape& tape = q.tape();
        Matrix dq = Matrix::Zero(q.rows(), q.cols());
        Matrix dk = Matrix::Zero(k.rows(), k.cols());
        Matrix dv = Matrix::Zero(v.rows(), v.cols());
        for (int h = 0; h < heads; ++h) {
          const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
          const auto go = g.middleCols(h * dh, dh);
          const auto qh = q.value().middleCols(h * dh, dh);
          const auto kh = k.value().middleCols(h * dh, dh);
          const auto vh = v.value().middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh) = p.transpose() * go;
          const Matrix dp = go * vh.transpose();
          Matrix ds(p.rows(), p.cols());
          for (Index r = 0; r < p.rows(); ++r) {
            const double dot = dp.row(r).dot(p.row(r));
            ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
          }
          ds *= scale;
          dq.middleCols(h * dh, dh) = ds * kh;
          dk.middleCols(h * dh, dh) = ds.transpose() * qh;
        }
        if (q.requires_grad()) tape.accumulate(q, dq);
        if (k.requires_grad()) tape.accumulate(k, dk);
        if (v.requires_grad()) tape.accumulate(v, dv);
      });
}

}  // namespace instap::ad
