#include "boxgen/geometry.hpp"

#include <algorithm>
#include <sstream>

namespace boxgen {

void validate_box(const Box& b, const std::string& what) {
  if (!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0))
    throw ValidationError(what + ": box outside unit square " + box_str(b));
  if (!(b.x1 > b.x0 && b.y1 > b.y0))
    throw ValidationError(what + ": degenerate box " + box_str(b));
}

double compute_iou(const Box& a, const Box& b) {
  const double ix0 = std::max(a.x0, b.x0);
  const double iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1);
  const double iy1 = std::min(a.y1, b.y1);
  const double iw = ix1 - ix0;
  const double ih = iy1 - iy0;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double overlap_frac(const Box& a, const Box& b) {
  const double ix0 = std::max(a.x0, b.x0);
  const double iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1);
  const double iy1 = std::min(a.y1, b.y1);
  const double iw = ix1 - ix0;
  const double ih = iy1 - iy0;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double aa = a.area();
  return aa > 0.0 ? (iw * ih) / aa : 0.0;
}

Box clamp_box(const Box& b) {
  Box c;
  c.x0 = std::clamp(b.x0, 0.0, 1.0);
  c.y0 = std::clamp(b.y0, 0.0, 1.0);
  c.x1 = std::clamp(b.x1, 0.0, 1.0);
  c.y1 = std::clamp(b.y1, 0.0, 1.0);
  return c;
}

std::string box_str(const Box& b) {
  std::ostringstream os;
  os << "[" << b.x0 << "," << b.y0 << "," << b.x1 << "," << b.y1 << "]";
  return os.str();
}

}  // namespace boxgen
