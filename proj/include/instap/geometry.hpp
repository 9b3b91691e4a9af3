// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "instap/schema.hpp"

namespace instap {

/// Axis-aligned box by corners, x1 < x2 and y1 < y2 for positive area.
struct Rect {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

Rect to_rect(const Box& b);
Rect rect_from_center(double cx, double cy, double w, double h);

/// Both throw std::invalid_argument for a box without positive area.
double iou(const Rect& a, const Rect& b);
/// IoU − (enclosure − union) / enclosure, in (−1, 1].
double giou(const Rect& a, const Rect& b);

inline double iou(const Box& a, const Box& b) { return iou(to_rect(a), to_rect(b)); }
inline double giou(const Box& a, const Box& b) { return giou(to_rect(a), to_rect(b)); }

/// Normalised (cx, cy, w, h) of a pixel box on a width × height frame.
struct NormBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};
NormBox normalise(const Box& b, int width, int height);

}  // namespace instap
