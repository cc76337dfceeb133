#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lfyolo/autodiff.hpp"
#include "lfyolo/geometry.hpp"
#include "lfyolo/io.hpp"
#include "lfyolo/model.hpp"

namespace lfyolo {

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross entropy over elements whose mask is nonzero (an empty
/// mask means all). Probabilities are clamped to [1e-7, 1 - 1e-7]; a mask
/// excluding everything yields 0.
double bce_loss(std::span<const double> pred, std::span<const double> target,
                std::span<const std::uint8_t> mask = {});

/// Objectness and ignore flags for one head, indexed like the head's grid:
/// ((n * anchors + a) * grid_h + y) * grid_w + x.
struct HeadTargets {
  int batch = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::uint8_t> object;
  std::vector<std::uint8_t> ignore;

  std::size_t index(int n, int a, int y, int x) const {
    return ((static_cast<std::size_t>(n) * kAnchorsPerHead + a) * grid_h + y) * grid_w + x;
  }
};

struct Positive {
  int batch = 0;
  int head = 0;
  int anchor = 0;  // within the head
  int cell_x = 0;
  int cell_y = 0;
  int class_id = 0;
  int truth_index = 0;  // within the image's annotation list
  Box box;              // input-pixel coordinates
};

struct TargetMap {
  std::array<HeadTargets, kNumHeads> heads;
  std::vector<Positive> positives;
  int num_classes = 0;
};

/// IoU of two boxes sharing a center.
double shape_iou(double w_a, double h_a, double w_b, double h_b);

/// Every ground-truth box claims the anchor (of all nine) with the best
/// shape IoU, at the cell of that anchor's head containing its center. If
/// that slot is already taken the next best anchor is used. Other anchors
/// whose shape IoU exceeds 0.5 are ignored for objectness at their cell.
TargetMap assign_targets(std::span<const std::vector<io::AnnotatedBox>> annotations,
                         const ModelConfig& config);

struct LossWeights {
  double obj = 1.0;
  double cls = 1.0;
  double box = 1.0;
};

struct LossComponents {
  double obj = 0.0;
  double cls = 0.0;
  double box = 0.0;
  double total = 0.0;
};

struct LossResult {
  ad::Var total;
  LossComponents parts;
};

/// L_obj: mean BCE of sigmoid(objectness) over non-ignored anchor cells.
/// L_cls: mean BCE of sigmoid(class logits) over positives x classes.
/// L_box: mean (1 - IoU) of decoded boxes over positives.
/// The returned scalar is recorded on the active tape with exact gradients
/// into all three raw head maps.
LossResult total_loss(std::span<const ad::Var> heads, const TargetMap& targets,
                      const ModelConfig& config, const LossWeights& weights = {});

}  // namespace lfyolo
