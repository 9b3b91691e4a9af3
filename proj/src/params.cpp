// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/params.hpp"

#include <stdexcept>

namespace instap {

const Matrix& ParamStore::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

Matrix& ParamStore::at(std::string_view name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

std::vector<std::string> ParamStore::names_with_prefix(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors_) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(name);
  }
  return out;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.tensors_.size() != b.tensors_.size()) return false;
  for (auto ia = a.tensors_.begin(), ib = b.tensors_.begin(); ia != a.tensors_.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.rows() != ib->second.rows() || ia->second.cols() != ib->second.cols()) {
      return false;
    }
    if (ia->second != ib->second) return false;
  }
  return true;
}

ad::Var Bindings::operator()(std::string_view name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Matrix& value = store_->at(name);
  ad::Var v = trainable_ ? tape_->leaf(value) : tape_->constant(value);
  bound_.emplace(std::string(name), v);
  return v;
}

GradMap Bindings::gradients() const {
  GradMap out;
  for (const auto& [name, v] : bound_) {
    if (v.has_grad()) out.emplace(name, v.grad());
  }
  return out;
}

}  // namespace instap
