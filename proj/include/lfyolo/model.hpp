#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lfyolo/blocks.hpp"
#include "lfyolo/geometry.hpp"
#include "lfyolo/params.hpp"

namespace lfyolo {

struct Anchor {
  double w = 0.0;
  double h = 0.0;
};

inline constexpr int kNumHeads = 3;
inline constexpr int kAnchorsPerHead = 3;
inline constexpr int kBaseWidth = 32;
/// Size logits are clamped to this before exponentiation.
inline constexpr double kMaxLogScale = 10.0;

/// Nine anchors sorted by area, rescaled from the canonical 416-pixel
/// darknet set to the given input size.
std::array<Anchor, 9> default_anchors(int input_h, int input_w);

struct ModelConfig {
  int width_C = kBaseWidth;
  double width_multiplier = 1.0;
  int num_classes = 3;
  int input_h = 320;
  int input_w = 320;
  std::array<Anchor, 9> anchors = default_anchors(320, 320);
  std::array<int, kNumHeads> strides{8, 16, 32};
  double conf_threshold = 0.25;
  double nms_iou = 0.45;

  /// C = round(32 * n); anchors follow the input size.
  static ModelConfig with_multiplier(double n, int num_classes = 3,
                                     int input_size = 320);

  int outputs_per_anchor() const { return 5 + num_classes; }
  int head_channels() const { return kAnchorsPerHead * outputs_per_anchor(); }
  std::span<const Anchor> head_anchors(int head) const {
    return std::span<const Anchor>(anchors).subspan(head * kAnchorsPerHead,
                                                    kAnchorsPerHead);
  }
  void validate() const;
};

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
};

/// One row of the backbone table.
struct Stage {
  enum class Type { kCbl, kMaxPool, kEfe, kRmf };
  std::string name;  // "s1" ... "s20"
  Type type;
  std::variant<CblSpec, int, EfeSpec, RmfSpec> spec;  // int = pool kernel
  int c_out = 0;
};

struct HeadSpec {
  int stride = 0;
  int c_in = 0;       // channels entering the reduce CBL
  int width = 0;      // reduce / ghost width
  int route_out = 0;  // width of the route CBL feeding the next finer head
};

class Model {
 public:
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::vector<Stage>& stages() const { return stages_; }
  const std::array<HeadSpec, kNumHeads>& heads() const { return heads_; }
  std::vector<std::string> stage_names() const;

  /// Every primitive layer, backbone in table order then heads, with
  /// output sizes for an h x w input.
  LayerList describe(int input_h, int input_w) const;

  /// Seeded weight initialization (He-normal convs, objectness prior bias).
  void initialize(std::uint64_t seed);

  using StageTap = std::function<void(const std::string& stage,
                                      const ad::Var& output)>;

  /// Raw (pre-sigmoid) head maps ordered by stride 8, 16, 32.
  std::array<ad::Var, kNumHeads> forward(const ad::Var& image,
                                         const ForwardContext& ctx,
                                         const StageTap& tap = {});

 private:
  ModelConfig config_;
  std::vector<Stage> stages_;
  std::array<HeadSpec, kNumHeads> heads_{};
  ParamStore params_;
};

/// Per cell and anchor: center = (sigmoid(t) + cell) * stride, size =
/// anchor * exp(min(t, kMaxLogScale)), score = sigmoid(obj) * max
/// sigmoid(cls). Keeps scores strictly above `conf_threshold`, clipped to
/// the image.
std::vector<Detection> decode(const Tensor& raw, std::span<const Anchor> anchors,
                              int stride, double conf_threshold,
                              int num_classes, int image_w, int image_h,
                              int batch_index = 0);

/// Greedy per-class suppression; kept detections stay in descending score
/// order (stable for ties).
std::vector<Detection> nms(std::vector<Detection> detections,
                           double iou_threshold);

/// Forward (inference mode) + decode of all heads + NMS for batch item 0.
std::vector<Detection> detect(Model& model, const Tensor& image,
                              double conf_threshold, double nms_iou);

/// Raw values whose decode reproduces `box` for the given cell and anchor.
struct EncodedBox {
  double tx, ty, tw, th;
};
EncodedBox encode_box(const Box& box, const Anchor& anchor, int stride,
                      int cell_x, int cell_y);

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace lfyolo
