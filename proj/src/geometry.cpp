// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace instap {

namespace {

void require_positive(const Rect& r) {
  if (!(r.width() > 0.0 && r.height() > 0.0)) {
    throw std::invalid_argument("box must have positive area");
  }
}

double intersection(const Rect& a, const Rect& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return w > 0.0 && h > 0.0 ? w * h : 0.0;
}

}  // namespace

Rect to_rect(const Box& b) {
  return Rect{static_cast<double>(b.x), static_cast<double>(b.y), static_cast<double>(b.x + b.w),
              static_cast<double>(b.y + b.h)};
}

Rect rect_from_center(double cx, double cy, double w, double h) {
  return Rect{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

double iou(const Rect& a, const Rect& b) {
  require_positive(a);
  require_positive(b);
  const double inter = intersection(a, b);
  return inter / (a.area() + b.area() - inter);
}

double giou(const Rect& a, const Rect& b) {
  require_positive(a);
  require_positive(b);
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosure =
      (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (enclosure - uni) / enclosure;
}

NormBox normalise(const Box& b, int width, int height) {
  return NormBox{(b.x + 0.5 * b.w) / width, (b.y + 0.5 * b.h) / height,
                 static_cast<double>(b.w) / width, static_cast<double>(b.h) / height};
}

}  // namespace instap
