// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/parallel.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace instap {

void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  auto work = [&](int begin, int stride) {
    for (int i = begin; i < count; i += stride) fn(i);
  };
  threads = std::clamp(threads, 1, std::max(1, count));
  if (threads == 1) {
    work(0, 1);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w, threads);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace instap
