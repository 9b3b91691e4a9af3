// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string_view>

#include "instap/params.hpp"

namespace instap {

/// First and second moments, created lazily with the shape of the parameter
/// the first time it receives a gradient.
struct OptState {
  GradMap m;
  GradMap v;
  std::int64_t step = 0;

  friend bool operator==(const OptState&, const OptState&) = default;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One decoupled-decay Adam step over every tensor in `grads`:
///   p ← p − lr · (m̂ / (√v̂ + ε) + wd · p)
/// Parameters absent from `grads` are left untouched; decay only reaches
/// names for which `decays(name)` holds. Throws std::invalid_argument on a
/// shape mismatch or an unknown name.
void adamw_update(ParamStore& params, const GradMap& grads, OptState& opt, double lr,
                  const AdamWConfig& config,
                  const std::function<bool(std::string_view)>& decays);

/// Linear warm-up to `base` over `warmup` steps, then half-cosine to 0 at
/// `total`. Steps past `total` return 0.
double cosine_lr(std::int64_t step, std::int64_t total, double base, std::int64_t warmup);

}  // namespace instap
