#include "lfyolo/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

struct BceTerm {
  double loss;
  double d_logit;  // derivative of the loss w.r.t. the pre-sigmoid value
};

BceTerm bce_from_logit(double z, double target) {
  const double p = sigmoid(z);
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  const double loss = -(target * std::log(q) + (1.0 - target) * std::log(1.0 - q));
  return {loss, p == q ? p - target : 0.0};
}

}  // namespace

double bce_loss(std::span<const double> pred, std::span<const double> target,
                std::span<const std::uint8_t> mask) {
  if (pred.size() != target.size() || (!mask.empty() && mask.size() != pred.size())) {
    throw ShapeError("bce_loss: prediction, target and mask sizes differ");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double q = std::clamp(pred[i], kProbClamp, 1.0 - kProbClamp);
    sum += -(target[i] * std::log(q) + (1.0 - target[i]) * std::log(1.0 - q));
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double shape_iou(double w_a, double h_a, double w_b, double h_b) {
  const double inter = std::min(w_a, w_b) * std::min(h_a, h_b);
  const double uni = w_a * h_a + w_b * h_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

TargetMap assign_targets(std::span<const std::vector<io::AnnotatedBox>> annotations,
                         const ModelConfig& config) {
  TargetMap map;
  map.num_classes = config.num_classes;
  const int batch = static_cast<int>(annotations.size());
  for (int h = 0; h < kNumHeads; ++h) {
    HeadTargets& t = map.heads[h];
    t.batch = batch;
    t.grid_h = config.input_h / config.strides[h];
    t.grid_w = config.input_w / config.strides[h];
    const std::size_t n = static_cast<std::size_t>(batch) * kAnchorsPerHead * t.grid_h * t.grid_w;
    t.object.assign(n, 0);
    t.ignore.assign(n, 0);
  }

  const int num_anchors = static_cast<int>(config.anchors.size());
  for (int b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < annotations[b].size(); ++i) {
      const io::AnnotatedBox& a = annotations[b][i];
      if (!(a.cx >= 0.0 && a.cx <= 1.0 && a.cy >= 0.0 && a.cy <= 1.0)) {
        throw ValidationError("image " + std::to_string(b) + " box " + std::to_string(i) +
                              ": center (" + std::to_string(a.cx) + ", " +
                              std::to_string(a.cy) + ") outside the image");
      }
      if (a.class_id < 0 || a.class_id >= config.num_classes) {
        throw ValidationError("image " + std::to_string(b) + " box " + std::to_string(i) +
                              ": class " + std::to_string(a.class_id) + " outside [0, " +
                              std::to_string(config.num_classes) + ")");
      }
      const Box box = a.to_box(config.input_w, config.input_h);
      const double px = a.cx * config.input_w;
      const double py = a.cy * config.input_h;

      std::vector<double> ious(num_anchors);
      for (int k = 0; k < num_anchors; ++k) {
        ious[k] = shape_iou(box.width(), box.height(), config.anchors[k].w, config.anchors[k].h);
      }
      std::vector<int> order(num_anchors);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int l, int r) { return ious[l] > ious[r]; });

      auto cell_of = [&](int k) {
        const int h = k / kAnchorsPerHead;
        const HeadTargets& t = map.heads[h];
        const int s = config.strides[h];
        const int x = std::min(static_cast<int>(px / s), t.grid_w - 1);
        const int y = std::min(static_cast<int>(py / s), t.grid_h - 1);
        return std::array<int, 4>{h, k % kAnchorsPerHead, x, y};
      };

      int chosen = -1;
      for (int k : order) {
        const auto [h, an, x, y] = cell_of(k);
        std::uint8_t& slot = map.heads[h].object[map.heads[h].index(b, an, y, x)];
        if (slot) continue;
        slot = 1;
        chosen = k;
        map.positives.push_back({b, h, an, x, y, a.class_id, static_cast<int>(i), box});
        break;
      }
      if (chosen < 0) {
        throw ValidationError("image " + std::to_string(b) + " box " + std::to_string(i) +
                              ": every anchor slot at its center is already taken");
      }
      for (int k = 0; k < num_anchors; ++k) {
        if (k == chosen || !(ious[k] > 0.5)) continue;
        const auto [h, an, x, y] = cell_of(k);
        map.heads[h].ignore[map.heads[h].index(b, an, y, x)] = 1;
      }
    }
  }
  for (HeadTargets& t : map.heads) {
    for (std::size_t i = 0; i < t.object.size(); ++i) {
      if (t.object[i]) t.ignore[i] = 0;
    }
  }
  return map;
}

LossResult total_loss(std::span<const ad::Var> heads, const TargetMap& targets,
                      const ModelConfig& config, const LossWeights& weights) {
  if (heads.size() != kNumHeads) {
    throw ShapeError("total_loss: expected 3 head maps, got " + std::to_string(heads.size()));
  }
  const int per = config.outputs_per_anchor();
  for (int h = 0; h < kNumHeads; ++h) {
    const Shape s = heads[h].shape();
    const HeadTargets& t = targets.heads[h];
    if (s.n != t.batch || s.c != kAnchorsPerHead * per || s.h != t.grid_h || s.w != t.grid_w) {
      throw ShapeError("total_loss: head " + std::to_string(h) + " has dims " + s.str() +
                       ", targets expect (" + std::to_string(t.batch) + ", " +
                       std::to_string(kAnchorsPerHead * per) + ", " +
                       std::to_string(t.grid_h) + ", " + std::to_string(t.grid_w) + ")");
    }
  }

  std::array<Tensor, kNumHeads> g_obj, g_cls, g_box;
  for (int h = 0; h < kNumHeads; ++h) {
    g_obj[h] = g_cls[h] = g_box[h] = Tensor(heads[h].shape(), 0.0);
  }

  // Objectness over every non-ignored anchor cell.
  double obj_sum = 0.0;
  std::size_t obj_count = 0;
  for (int h = 0; h < kNumHeads; ++h) {
    const HeadTargets& t = targets.heads[h];
    const Tensor& raw = heads[h].value();
    for (int n = 0; n < t.batch; ++n) {
      for (int a = 0; a < kAnchorsPerHead; ++a) {
        for (int y = 0; y < t.grid_h; ++y) {
          for (int x = 0; x < t.grid_w; ++x) {
            const std::size_t i = t.index(n, a, y, x);
            if (t.ignore[i]) continue;
            const BceTerm term = bce_from_logit(raw.at(n, a * per + 4, y, x), t.object[i]);
            obj_sum += term.loss;
            g_obj[h].at(n, a * per + 4, y, x) = term.d_logit;
            ++obj_count;
          }
        }
      }
    }
  }

  // Classes and boxes over positives.
  double cls_sum = 0.0;
  double box_sum = 0.0;
  for (const Positive& p : targets.positives) {
    const Tensor& raw = heads[p.head].value();
    const int base = p.anchor * per;
    for (int c = 0; c < config.num_classes; ++c) {
      const BceTerm term = bce_from_logit(raw.at(p.batch, base + 5 + c, p.cell_y, p.cell_x),
                                          c == p.class_id ? 1.0 : 0.0);
      cls_sum += term.loss;
      g_cls[p.head].at(p.batch, base + 5 + c, p.cell_y, p.cell_x) = term.d_logit;
    }

    auto t = [&](int k) { return raw.at(p.batch, base + k, p.cell_y, p.cell_x); };
    const int stride = config.strides[p.head];
    const Anchor& anchor = config.head_anchors(p.head)[p.anchor];
    const double sx = sigmoid(t(0));
    const double sy = sigmoid(t(1));
    const bool w_clamped = t(2) > kMaxLogScale;
    const bool h_clamped = t(3) > kMaxLogScale;
    const double w = anchor.w * std::exp(std::min(t(2), kMaxLogScale));
    const double h = anchor.h * std::exp(std::min(t(3), kMaxLogScale));
    const Box pred = Box::from_center((sx + p.cell_x) * stride, (sy + p.cell_y) * stride, w, h);
    const IouGradient ig = iou_with_gradient(pred, p.box);
    box_sum += 1.0 - ig.iou;
    // d(1 - iou) / d(x_min, y_min, x_max, y_max)
    const double dx0 = -ig.d_box[0], dy0 = -ig.d_box[1];
    const double dx1 = -ig.d_box[2], dy1 = -ig.d_box[3];
    Tensor& gb = g_box[p.head];
    gb.at(p.batch, base + 0, p.cell_y, p.cell_x) = (dx0 + dx1) * stride * sx * (1.0 - sx);
    gb.at(p.batch, base + 1, p.cell_y, p.cell_x) = (dy0 + dy1) * stride * sy * (1.0 - sy);
    gb.at(p.batch, base + 2, p.cell_y, p.cell_x) = w_clamped ? 0.0 : (dx1 - dx0) * 0.5 * w;
    gb.at(p.batch, base + 3, p.cell_y, p.cell_x) = h_clamped ? 0.0 : (dy1 - dy0) * 0.5 * h;
  }

  const std::size_t positives = targets.positives.size();
  const double obj_scale = obj_count ? 1.0 / static_cast<double>(obj_count) : 0.0;
  const double cls_scale =
      positives ? 1.0 / static_cast<double>(positives * config.num_classes) : 0.0;
  const double box_scale = positives ? 1.0 / static_cast<double>(positives) : 0.0;

  LossComponents parts;
  parts.obj = obj_sum * obj_scale;
  parts.cls = cls_sum * cls_scale;
  parts.box = box_sum * box_scale;
  parts.total = weights.obj * parts.obj + weights.cls * parts.cls + weights.box * parts.box;

  auto grads = std::make_shared<std::array<Tensor, kNumHeads>>();
  for (int h = 0; h < kNumHeads; ++h) {
    Tensor g(heads[h].shape(), 0.0);
    auto out = g.data();
    const auto o = g_obj[h].data(), c = g_cls[h].data(), b = g_box[h].data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = weights.obj * obj_scale * o[i] + weights.cls * cls_scale * c[i] +
               weights.box * box_scale * b[i];
    }
    (*grads)[h] = std::move(g);
  }

  std::vector<ad::Var> inputs(heads.begin(), heads.end());
  ad::Var total = ad::record(Tensor::scalar(parts.total), inputs, [&] {
    return [inputs, grads](const Tensor& upstream) {
      const double s = upstream.item();
      for (int h = 0; h < kNumHeads; ++h) {
        if (!inputs[h].requires_grad()) continue;
        Tensor g = (*grads)[h];
        for (double& v : g.data()) v *= s;
        inputs[h].node()->accumulate(g);
      }
    };
  });
  return {total, parts};
}

}  // namespace lfyolo
