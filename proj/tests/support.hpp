#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "lfyolo/blocks.hpp"
#include "lfyolo/eval.hpp"
#include "lfyolo/io.hpp"
#include "lfyolo/kernels.hpp"
#include "lfyolo/params.hpp"
#include "lfyolo/tensor.hpp"
#include "lfyolo/train.hpp"

namespace testsupport {

using namespace lfyolo;

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1.0});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// Six-nested-loop cross-correlation with zero padding.
inline Tensor naive_conv(const Tensor& x, const Tensor& w, const std::vector<double>& bias,
                         int stride, int pad, int dil, int groups) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const int ho = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
  const int wo = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
  const int cig = xs.c / groups;
  const int cog = ws.n / groups;
  Tensor y(Shape{xs.n, ws.n, ho, wo});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          const int g = co / cog;
          for (int ci = 0; ci < cig; ++ci)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = oy * stride - pad + ky * dil;
                const int ix = ox * stride - pad + kx * dil;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += x.at(n, g * cig + ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          y.at(n, co, oy, ox) = acc;
        }
  return y;
}

inline Tensor naive_maxpool(const Tensor& x, int k, int stride, int pad) {
  const Shape s = x.shape();
  const int ho = (s.h + 2 * pad - k) / stride + 1;
  const int wo = (s.w + 2 * pad - k) / stride + 1;
  Tensor y(Shape{s.n, s.c, ho, wo});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double m = -std::numeric_limits<double>::infinity();
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= s.h || ix >= s.w) continue;
              m = std::max(m, x.at(n, c, iy, ix));
            }
          y.at(n, c, oy, ox) = m;
        }
  return y;
}

/// Allocates the block's parameters and fills them with seeded values.
inline void randomize_params(ParamStore& store, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 0.3);
  std::uniform_real_distribution<double> pos(0.5, 1.5);
  for (auto& [name, p] : store) {
    for (double& v : p.value().data()) {
      switch (p.kind) {
        case ParamKind::kBnGamma:
        case ParamKind::kBnRunningVar: v = pos(rng); break;
        default: v = d(rng);
      }
    }
  }
}

inline Tensor param(const ParamStore& s, const std::string& name) { return s.at(name).value(); }

// Inference-mode BN then leaky ReLU, element by element.
inline Tensor bn_leaky_oracle(const Tensor& x, const ParamStore& s, const std::string& bn) {
  const Tensor g = param(s, bn + ".gamma"), b = param(s, bn + ".beta");
  const Tensor m = param(s, bn + ".running_mean"), v = param(s, bn + ".running_var");
  Tensor y(x.shape());
  for (int n = 0; n < x.shape().n; ++n)
    for (int c = 0; c < x.shape().c; ++c)
      for (int h = 0; h < x.shape().h; ++h)
        for (int w = 0; w < x.shape().w; ++w) {
          const double z = (x.at(n, c, h, w) - m[c]) / std::sqrt(v[c] + 1e-5) * g[c] + b[c];
          y.at(n, c, h, w) = z > 0 ? z : 0.1 * z;
        }
  return y;
}

inline Tensor concat_oracle(const Tensor& a, const Tensor& b) {
  const Shape s = a.shape();
  Tensor y(Shape{s.n, s.c + b.shape().c, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < y.shape().c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w)
          y.at(n, c, h, w) = c < s.c ? a.at(n, c, h, w) : b.at(n, c - s.c, h, w);
  return y;
}

// Ghost / GD conv composed from the nested-loop conv oracle.
inline Tensor ghost_oracle(const Tensor& x, const GhostSpec& spec, const ParamStore& s,
                    const std::string& p) {
  Tensor intrinsic = testsupport::naive_conv(x, param(s, p + ".primary.weight"), {}, 1,
                                             spec.primary_kernel / 2, 1, 1);
  if (spec.ratio_s == 1) return bn_leaky_oracle(intrinsic, s, p + ".bn");
  Tensor ghosts = testsupport::naive_conv(intrinsic, param(s, p + ".cheap.weight"), {}, 1,
                                          spec.dilation * (spec.cheap_kernel - 1) / 2,
                                          spec.dilation, spec.intrinsic());
  return bn_leaky_oracle(concat_oracle(intrinsic, ghosts), s, p + ".bn");
}

// Brute-force AP: for every distinct score threshold t (descending), the
// operating point keeps detections with score >= t; precision is then made
// monotone from the right and integrated over recall steps.
inline double brute_force_ap(const std::vector<EvalRecord>& records, int cls) {
  std::vector<double> thresholds;
  std::size_t gts = 0;
  for (const auto& r : records) {
    for (const auto& d : r.detections)
      if (d.class_id == cls) thresholds.push_back(d.score);
    for (const auto& t : r.truths) gts += t.class_id == cls ? 1 : 0;
  }
  if (gts == 0) return -1.0;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (double t : thresholds) {
    std::size_t tp = 0, kept = 0;
    for (const auto& r : records) {
      std::vector<std::pair<double, Box>> dets;
      for (const auto& d : r.detections)
        if (d.class_id == cls && d.score >= t) dets.push_back({d.score, d.box});
      std::stable_sort(dets.begin(), dets.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<Box> truths;
      for (const auto& g : r.truths)
        if (g.class_id == cls) truths.push_back(g.box);
      std::vector<bool> used(truths.size(), false);
      for (const auto& [s, b] : dets) {
        ++kept;
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t j = 0; j < truths.size(); ++j) {
          if (used[j]) continue;
          const double v = iou(b, truths[j]);
          if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(j);
          }
        }
        if (best >= 0 && best_iou >= 0.5) {
          used[best] = true;
          ++tp;
        }
      }
    }
    pr.push_back({static_cast<double>(tp) / gts, static_cast<double>(tp) / kept});
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    double p = 0.0;
    for (std::size_t j = i; j < pr.size(); ++j) p = std::max(p, pr[j].second);
    ap += (pr[i].first - prev_recall) * p;
    prev_recall = pr[i].first;
  }
  return ap;
}

// ----------------------------------------------------------- synthetic data

struct SyntheticObject {
  int class_id;
  int x0, y0, x1, y1;  // pixel rectangle, exclusive upper bounds
};

inline io::Image synthetic_image(int size, const std::vector<SyntheticObject>& objects) {
  static const std::uint8_t colors[3][3] = {{230, 50, 50}, {50, 230, 50}, {50, 75, 240}};
  io::Image img;
  img.width = size;
  img.height = size;
  img.channels = 3;
  img.pixels.assign(static_cast<std::size_t>(size) * size * 3, 38);
  for (const auto& o : objects)
    for (int y = o.y0; y < o.y1; ++y)
      for (int x = o.x0; x < o.x1; ++x)
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = colors[o.class_id][c];
  return img;
}

inline std::vector<io::AnnotatedBox> synthetic_boxes(int size,
                                                     const std::vector<SyntheticObject>& objects) {
  std::vector<io::AnnotatedBox> out;
  const double s = size;
  for (const auto& o : objects)
    out.push_back({o.class_id, (o.x0 + o.x1) / 2.0 / s, (o.y0 + o.y1) / 2.0 / s,
                   (o.x1 - o.x0) / s, (o.y1 - o.y0) / s});
  return out;
}

/// Four 64x64 images of colored rectangles over three classes.
inline std::vector<std::vector<SyntheticObject>> overfit_scenes() {
  return {{{0, 8, 10, 30, 34}},
          {{1, 34, 6, 58, 22}, {2, 6, 38, 26, 58}},
          {{2, 20, 20, 44, 44}},
          {{0, 40, 36, 60, 60}, {1, 4, 4, 20, 28}}};
}

inline std::vector<TrainSample> synthetic_samples(
    int size, const std::vector<std::vector<SyntheticObject>>& scenes) {
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    TrainSample s;
    s.id = "img" + std::to_string(i);
    s.image = io::image_to_tensor(synthetic_image(size, scenes[i]));
    s.boxes = synthetic_boxes(size, scenes[i]);
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes PNGs, annotation files, and a manifest into `dir`.
inline std::filesystem::path write_synthetic_dataset(
    const std::filesystem::path& dir, int size,
    const std::vector<std::vector<SyntheticObject>>& scenes) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string name = "img" + std::to_string(i) + ".png";
    io::write_png(dir / name, synthetic_image(size, scenes[i]));
    const auto boxes = synthetic_boxes(size, scenes[i]);
    io::save_annotations(io::annotation_path_for(dir / name), boxes);
    manifest += name + "\n";
  }
  io::write_file_atomic(dir / "manifest.txt", manifest);
  return dir / "manifest.txt";
}

/// mAP50 of a model over in-memory samples at the model input size.
inline MapResult evaluate(Model& model, const std::vector<TrainSample>& samples,
                          int num_classes, double conf = 0.001, double nms_iou = 0.45) {
  std::vector<EvalRecord> records;
  for (const auto& s : samples) {
    EvalRecord r;
    r.image_id = s.id;
    r.detections = detect(model, s.image, conf, nms_iou);
    const int h = s.image.shape().h, w = s.image.shape().w;
    for (const auto& b : s.boxes) r.truths.push_back({b.class_id, b.to_box(w, h)});
    records.push_back(std::move(r));
  }
  return map50(records, num_classes);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lfyolo_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
