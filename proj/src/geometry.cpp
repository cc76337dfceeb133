#include "lfyolo/geometry.hpp"

#include <algorithm>

namespace lfyolo {

double iou(const Box& a, const Box& b) {
  return iou_with_gradient(a, b).iou;
}

IouGradient iou_with_gradient(const Box& p, const Box& t) {
  IouGradient r;
  if (!p.valid() || !t.valid()) return r;
  const double ix1 = std::max(p.x_min, t.x_min);
  const double iy1 = std::max(p.y_min, t.y_min);
  const double ix2 = std::min(p.x_max, t.x_max);
  const double iy2 = std::min(p.y_max, t.y_max);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = p.area() + t.area() - inter;
  r.iou = inter / uni;

  // d(inter) with respect to each predicted edge.
  std::array<double, 4> d_inter{};
  if (iw > 0.0 && ih > 0.0) {
    if (p.x_min > t.x_min) d_inter[0] = -ih;
    if (p.y_min > t.y_min) d_inter[1] = -iw;
    if (p.x_max < t.x_max) d_inter[2] = ih;
    if (p.y_max < t.y_max) d_inter[3] = iw;
  }
  const std::array<double, 4> d_area{-p.height(), -p.width(), p.height(),
                                     p.width()};
  const double u2 = uni * uni;
  for (int i = 0; i < 4; ++i) {
    // iou = I / (Ap + At - I)
    r.d_box[i] = (d_inter[i] * uni - inter * (d_area[i] - d_inter[i])) / u2;
  }
  return r;
}

}  // namespace lfyolo
