#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lfyolo/geometry.hpp"
#include "lfyolo/model.hpp"

namespace lfyolo {

inline constexpr double kMatchIou = 0.5;

struct TruthBox {
  int class_id = 0;
  Box box;
};

struct EvalRecord {
  std::string image_id;
  std::vector<Detection> detections;
  std::vector<TruthBox> truths;
};

/// Single image, single class. Detections are visited by descending score
/// (ties keep input order); each claims the unmatched truth of highest IoU
/// and is a true positive iff that IoU >= threshold. Flags follow the input
/// order.
std::vector<bool> match(std::span<const Detection> detections,
                        std::span<const Box> truths, double iou_threshold = kMatchIou);

/// All-point interpolated area under the precision/recall curve for flags
/// ranked by descending score.
double average_precision(const std::vector<bool>& ranked_flags, std::size_t num_truths);

/// AP50 of one class pooled over all records; nullopt without truths.
std::optional<double> ap50(std::span<const EvalRecord> records, int class_id);

struct MapResult {
  std::vector<std::optional<double>> per_class;
  double map = 0.0;
  int evaluated_classes = 0;
};

/// Unweighted mean AP50 over classes that have truths; ValidationError if
/// none do.
MapResult map50(std::span<const EvalRecord> records, int num_classes);

/// `class,AP50` table with an `mAP50` footer; classes without truths are
/// shown as "-".
std::string render_map_table(const MapResult& result);
std::string render_map_csv(const MapResult& result);

}  // namespace lfyolo
