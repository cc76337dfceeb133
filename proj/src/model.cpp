#include "lfyolo/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

constexpr std::array<Anchor, 9> kDarknetAnchors{{{10, 13},
                                                 {16, 30},
                                                 {33, 23},
                                                 {30, 61},
                                                 {62, 45},
                                                 {59, 119},
                                                 {116, 90},
                                                 {156, 198},
                                                 {373, 326}}};

const char* kHeadNames[kNumHeads] = {"s8", "s16", "s32"};

GhostSpec head_ghost(int width) {
  GhostSpec g;
  g.c_in = width;
  g.c_out = width;
  g.primary_kernel = 3;
  return g;
}

std::string head_path(int head, const char* part) {
  return std::string("head.") + kHeadNames[head] + "." + part;
}

std::string route_path(int head) {
  return std::string("route.") + kHeadNames[head];
}

}  // namespace

std::array<Anchor, 9> default_anchors(int input_h, int input_w) {
  std::array<Anchor, 9> out = kDarknetAnchors;
  for (Anchor& a : out) {
    a.w *= input_w / 416.0;
    a.h *= input_h / 416.0;
  }
  return out;
}

ModelConfig ModelConfig::with_multiplier(double n, int num_classes,
                                         int input_size) {
  ModelConfig c;
  c.width_multiplier = n;
  c.width_C = static_cast<int>(std::lround(kBaseWidth * n));
  c.num_classes = num_classes;
  c.input_h = c.input_w = input_size;
  c.anchors = default_anchors(input_size, input_size);
  return c;
}

void ModelConfig::validate() const {
  if (width_C < 2 || width_C % 2 != 0) {
    throw ConfigError("width C = " + std::to_string(width_C) +
                      " must be an even count >= 2");
  }
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw ConfigError("input size " + std::to_string(input_w) + "x" +
                      std::to_string(input_h) +
                      " must be a positive multiple of 32");
  }
  if (strides != std::array<int, kNumHeads>{8, 16, 32}) {
    throw ConfigError("strides must be 8,16,32");
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (!(anchors[i].w > 0.0 && anchors[i].h > 0.0)) {
      throw ConfigError("anchor " + std::to_string(i) + " must be positive");
    }
    if (i > 0 && anchors[i].w * anchors[i].h < anchors[i - 1].w * anchors[i - 1].h) {
      throw ConfigError("anchors must be sorted ascending by area");
    }
  }
  if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) {
    throw ConfigError("conf_threshold must lie in [0, 1]");
  }
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) {
    throw ConfigError("nms_iou must lie in [0, 1]");
  }
}

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  const int C = config.width_C;

  int index = 1;
  auto name = [&index] { return "s" + std::to_string(index++); };
  m.stages_.push_back({name(), Stage::Type::kCbl, CblSpec{3, C / 2, 3, 1}, C / 2});
  int channels = C / 2;
  const int widths[] = {2 * C, 4 * C, 8 * C, 16 * C, 32 * C};
  const int repeats[] = {1, 2, 4, 4, 2};
  for (int stage = 0; stage < 5; ++stage) {
    m.stages_.push_back({name(), Stage::Type::kMaxPool, 2, channels});
    for (int r = 0; r < repeats[stage]; ++r) {
      EfeSpec e{channels, widths[stage]};
      m.stages_.push_back({name(), Stage::Type::kEfe, e, widths[stage]});
      channels = widths[stage];
    }
  }
  RmfSpec rmf_spec;
  rmf_spec.c_in = channels;
  m.stages_.push_back({name(), Stage::Type::kRmf, rmf_spec, rmf_spec.c_out()});

  // heads_[0..2] = strides 8, 16, 32; widths are a quarter of the matching
  // backbone stage.
  const int rmf_out = rmf_spec.c_out();
  m.heads_[2] = {32, rmf_out, 8 * C, 4 * C};
  m.heads_[1] = {16, 4 * C + 16 * C, 4 * C, 2 * C};
  m.heads_[0] = {8, 2 * C + 8 * C, 2 * C, 0};

  allocate_params(m.describe(config.input_h, config.input_w), m.params_);
  return m;
}

std::vector<std::string> Model::stage_names() const {
  std::vector<std::string> out;
  for (const Stage& s : stages_) out.push_back(s.name);
  return out;
}

LayerList Model::describe(int input_h, int input_w) const {
  LayerList out;
  Shape x{1, 3, input_h, input_w};
  Shape taps[2];  // s11, s16 outputs
  for (const Stage& st : stages_) {
    const std::string prefix = "backbone." + st.name;
    switch (st.type) {
      case Stage::Type::kCbl:
        x = lfyolo::describe(std::get<CblSpec>(st.spec), prefix, x, out);
        break;
      case Stage::Type::kMaxPool: {
        LayerDesc d;
        d.path = prefix;
        d.kind = LayerKind::kMaxPool;
        d.c_in = d.c_out = x.c;
        d.kernel = d.stride = std::get<int>(st.spec);
        x = kernels::maxpool2d_output_shape(x, d.kernel, d.stride, 0);
        d.out_h = x.h;
        d.out_w = x.w;
        out.push_back(d);
        break;
      }
      case Stage::Type::kEfe:
        x = lfyolo::describe(std::get<EfeSpec>(st.spec), prefix, x, out);
        break;
      case Stage::Type::kRmf:
        x = lfyolo::describe(std::get<RmfSpec>(st.spec), prefix, x, out);
        break;
    }
    if (st.name == "s11") taps[0] = x;
    if (st.name == "s16") taps[1] = x;
  }

  const int no = config_.head_channels();
  Shape trunk = x;
  for (int head = kNumHeads - 1; head >= 0; --head) {
    const HeadSpec& hs = heads_[head];
    Shape in = trunk;
    in.c = hs.c_in;
    Shape r = lfyolo::describe(CblSpec{hs.c_in, hs.width, 1, 1},
                               head_path(head, "reduce"), in, out);
    Shape g = lfyolo::describe(head_ghost(hs.width), head_path(head, "ghost"), r, out);
    LayerDesc pred;
    pred.path = head_path(head, "pred");
    pred.c_in = hs.width;
    pred.c_out = no;
    pred.bias = true;
    pred.out_h = g.h;
    pred.out_w = g.w;
    out.push_back(pred);
    if (head > 0) {
      Shape u = lfyolo::describe(CblSpec{hs.width, hs.route_out, 1, 1},
                                 route_path(head - 1), g, out);
      LayerDesc up;
      up.path = route_path(head - 1) + ".up";
      up.kind = LayerKind::kUpsample;
      up.c_in = up.c_out = u.c;
      up.out_h = u.h * 2;
      up.out_w = u.w * 2;
      out.push_back(up);
      trunk = Shape{1, hs.route_out + taps[head - 1].c, up.out_h, up.out_w};
    }
  }
  return out;
}

void Model::initialize(std::uint64_t seed) {
  init_conv_weights(params_, seed);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::normal_distribution<double> small(0.0, 0.01);
  const int per = config_.outputs_per_anchor();
  const double obj_prior = std::log(0.01 / 0.99);
  for (int head = 0; head < kNumHeads; ++head) {
    for (double& v : params_.at(head_path(head, "pred.weight")).value().data()) v = small(rng);
    Tensor& bias = params_.at(head_path(head, "pred.bias")).value();
    bias.fill(0.0);
    for (int a = 0; a < kAnchorsPerHead; ++a) bias[a * per + 4] = obj_prior;
  }
}

std::array<ad::Var, kNumHeads> Model::forward(const ad::Var& image,
                                              const ForwardContext& ctx,
                                              const StageTap& tap) {
  const Shape s = image.shape();
  if (s.c != 3 || s.h != config_.input_h || s.w != config_.input_w) {
    throw ShapeError("model input " + s.str() + " does not match configured (n, 3, " +
                     std::to_string(config_.input_h) + ", " +
                     std::to_string(config_.input_w) + ")");
  }
  ad::Var x = image;
  ad::Var skips[2];
  for (const Stage& st : stages_) {
    const LayerParams lp(params_, "backbone." + st.name);
    switch (st.type) {
      case Stage::Type::kCbl:
        x = cbl(x, std::get<CblSpec>(st.spec), lp, ctx);
        break;
      case Stage::Type::kMaxPool: {
        const int k = std::get<int>(st.spec);
        x = ad::maxpool2d(x, k, k, 0);
        break;
      }
      case Stage::Type::kEfe:
        x = efe(x, std::get<EfeSpec>(st.spec), lp, ctx);
        break;
      case Stage::Type::kRmf:
        x = rmf(x, std::get<RmfSpec>(st.spec), lp, ctx);
        break;
    }
    if (tap) tap(st.name, x);
    if (st.name == "s11") skips[0] = x;
    if (st.name == "s16") skips[1] = x;
  }

  std::array<ad::Var, kNumHeads> out;
  ad::Var trunk = x;
  for (int head = kNumHeads - 1; head >= 0; --head) {
    const HeadSpec& hs = heads_[head];
    ad::Var r = cbl(trunk, CblSpec{hs.c_in, hs.width, 1, 1},
                    LayerParams(params_, head_path(head, "reduce")), ctx);
    ad::Var g = ghost_conv(r, head_ghost(hs.width),
                           LayerParams(params_, head_path(head, "ghost")), ctx);
    out[head] = conv_bias(g, LayerParams(params_, head_path(head, "pred")), 1);
    if (head > 0) {
      ad::Var u = cbl(g, CblSpec{hs.width, hs.route_out, 1, 1},
                      LayerParams(params_, route_path(head - 1)), ctx);
      const ad::Var parts[] = {ad::upsample_nearest_2x(u), skips[head - 1]};
      trunk = ad::concat_channels(parts);
    }
  }
  return out;
}

std::vector<Detection> decode(const Tensor& raw, std::span<const Anchor> anchors,
                              int stride, double conf_threshold,
                              int num_classes, int image_w, int image_h,
                              int batch_index) {
  const Shape s = raw.shape();
  const int per = 5 + num_classes;
  if (s.c != static_cast<int>(anchors.size()) * per) {
    throw ShapeError("decode: raw map " + s.str() + " has " + std::to_string(s.c) +
                     " channels, expected " +
                     std::to_string(anchors.size() * per));
  }
  if (batch_index < 0 || batch_index >= s.n) {
    throw ShapeError("decode: batch index out of range");
  }
  std::vector<Detection> out;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const int base = static_cast<int>(a) * per;
    for (int i = 0; i < s.h; ++i) {
      for (int j = 0; j < s.w; ++j) {
        auto t = [&](int k) { return raw.at(batch_index, base + k, i, j); };
        const double obj = sigmoid(t(4));
        int best = 0;
        double best_p = -1.0;
        for (int c = 0; c < num_classes; ++c) {
          const double p = sigmoid(t(5 + c));
          if (p > best_p) {
            best_p = p;
            best = c;
          }
        }
        const double score = obj * best_p;
        if (!(score > conf_threshold)) continue;
        const double cx = (sigmoid(t(0)) + j) * stride;
        const double cy = (sigmoid(t(1)) + i) * stride;
        const double w = anchors[a].w * std::exp(std::min(t(2), kMaxLogScale));
        const double h = anchors[a].h * std::exp(std::min(t(3), kMaxLogScale));
        Box b = Box::from_center(cx, cy, w, h);
        b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(image_w));
        b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(image_w));
        b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(image_h));
        b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(image_h));
        if (!b.valid()) continue;
        out.push_back({best, score, b});
      }
    }
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    const bool suppressed = std::any_of(
        kept.begin(), kept.end(), [&](const Detection& k) {
          return k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold;
        });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> detect(Model& model, const Tensor& image,
                              double conf_threshold, double nms_iou) {
  const ModelConfig& cfg = model.config();
  const auto heads = model.forward(ad::Var(image), ForwardContext{false});
  std::vector<Detection> all;
  for (int h = 0; h < kNumHeads; ++h) {
    auto d = decode(heads[h].value(), cfg.head_anchors(h), cfg.strides[h],
                    conf_threshold, cfg.num_classes, cfg.input_w, cfg.input_h);
    all.insert(all.end(), d.begin(), d.end());
  }
  return nms(std::move(all), nms_iou);
}

EncodedBox encode_box(const Box& box, const Anchor& anchor, int stride,
                      int cell_x, int cell_y) {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  const double fx = (box.x_min + box.x_max) / 2.0 / stride - cell_x;
  const double fy = (box.y_min + box.y_max) / 2.0 / stride - cell_y;
  if (!(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0)) {
    throw ContractError("encode_box: box center is not strictly inside cell");
  }
  return {logit(fx), logit(fy), std::log(box.width() / anchor.w),
          std::log(box.height() / anchor.h)};
}

}  // namespace lfyolo
