// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

namespace instap {

/// Calls fn(i) for i in [0, count), item i on worker i mod threads. Results
/// must be written to per-index slots so output does not depend on the
/// thread count. The first exception (by worker) is rethrown after joining.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

}  // namespace instap
