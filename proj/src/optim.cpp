// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace instap {

void adamw_update(ParamStore& params, const GradMap& grads, OptState& opt, double lr,
                  const AdamWConfig& config,
                  const std::function<bool(std::string_view)>& decays) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::invalid_argument("adamw_update: unknown parameter " + name);
    const Matrix& p = params.at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw std::invalid_argument("adamw_update: gradient shape mismatch for " + name);
    }
  }
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.step));
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    auto [mit, m_new] = opt.m.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = opt.v.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    const double wd = decays(name) ? config.weight_decay : 0.0;
    const Matrix step = (m / bc1).array() / ((v / bc2).array().sqrt() + config.eps);
    p -= lr * (step + wd * p);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total, double base, std::int64_t warmup) {
  if (total <= 0 || step >= total) return 0.0;
  if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace instap
