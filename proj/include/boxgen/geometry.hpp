#pragma once

#include <string>
#include <vector>

#include "boxgen/core/common.hpp"

namespace boxgen {

// Axis-aligned box in normalized image coordinates, corners (x0,y0)-(x1,y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double w() const { return x1 - x0; }
  double h() const { return y1 - y0; }
  double area() const { return w() * h(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }

  bool operator==(const Box&) const = default;
};

// Throws ValidationError on degenerate or out-of-range boxes.
void validate_box(const Box& b, const std::string& what);

double compute_iou(const Box& a, const Box& b);

// Intersection area / area of a (containment measure, not symmetric).
double overlap_frac(const Box& a, const Box& b);

Box clamp_box(const Box& b);

std::string box_str(const Box& b);

}  // namespace boxgen
