#pragma once

#include <array>

namespace lfyolo {

/// Axis-aligned box in pixel coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const {
    return valid() ? width() * height() : 0.0;
  }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
};

/// Intersection over union; 0 when either box has zero area.
double iou(const Box& a, const Box& b);

struct IouGradient {
  double iou = 0.0;
  // d(iou) / d(x_min, y_min, x_max, y_max) of the first box.
  std::array<double, 4> d_box{};
};

IouGradient iou_with_gradient(const Box& pred, const Box& truth);

inline double iou_loss(const Box& pred, const Box& truth) {
  return 1.0 - iou(pred, truth);
}

}  // namespace lfyolo
