#include "lfyolo/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

std::vector<std::size_t> by_descending_score(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  return order;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::vector<bool> match(std::span<const Detection> detections, std::span<const Box> truths,
                        double iou_threshold) {
  std::vector<bool> flags(detections.size(), false);
  std::vector<bool> used(truths.size(), false);
  for (std::size_t d : by_descending_score(detections)) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (used[t]) continue;
      const double v = iou(detections[d].box, truths[t]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      used[best] = true;
      flags[d] = true;
    }
  }
  return flags;
}

double average_precision(const std::vector<bool>& ranked_flags, std::size_t num_truths) {
  if (num_truths == 0) throw ValidationError("average precision needs at least one truth");
  const std::size_t n = ranked_flags.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked_flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_truths);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::optional<double> ap50(std::span<const EvalRecord> records, int class_id) {
  struct Ranked {
    double score;
    bool tp;
  };
  std::vector<Ranked> pooled;
  std::size_t num_truths = 0;
  for (const EvalRecord& r : records) {
    std::vector<Detection> dets;
    std::vector<Box> truths;
    for (const Detection& d : r.detections) {
      if (d.class_id == class_id) dets.push_back(d);
    }
    for (const TruthBox& t : r.truths) {
      if (t.class_id == class_id) truths.push_back(t.box);
    }
    num_truths += truths.size();
    const auto flags = match(dets, truths);
    for (std::size_t i = 0; i < dets.size(); ++i) pooled.push_back({dets[i].score, flags[i]});
  }
  if (num_truths == 0) return std::nullopt;
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<bool> flags;
  for (const Ranked& r : pooled) flags.push_back(r.tp);
  return average_precision(flags, num_truths);
}

MapResult map50(std::span<const EvalRecord> records, int num_classes) {
  MapResult result;
  double sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const auto ap = ap50(records, c);
    result.per_class.push_back(ap);
    if (ap) {
      sum += *ap;
      ++result.evaluated_classes;
    }
  }
  if (result.evaluated_classes == 0) {
    throw ValidationError("mAP50 undefined: no class has ground-truth boxes");
  }
  result.map = sum / result.evaluated_classes;
  return result;
}

std::string render_map_table(const MapResult& result) {
  std::string out = "class   AP50\n";
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-7zu %s\n", c,
                  result.per_class[c] ? fmt(*result.per_class[c]).c_str() : "-");
    out += buf;
  }
  out += "mAP50   " + fmt(result.map) + "\n";
  return out;
}

std::string render_map_csv(const MapResult& result) {
  std::string out = "class,AP50\n";
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    out += std::to_string(c) + "," +
           (result.per_class[c] ? fmt(*result.per_class[c]) : std::string()) + "\n";
  }
  out += "mAP50," + fmt(result.map) + "\n";
  return out;
}

}  // namespace lfyolo
