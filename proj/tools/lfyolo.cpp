#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "lfyolo/analyzer.hpp"
#include "lfyolo/errors.hpp"
#include "lfyolo/eval.hpp"
#include "lfyolo/gradcheck.hpp"
#include "lfyolo/io.hpp"
#include "lfyolo/kernels.hpp"
#include "lfyolo/model.hpp"
#include "lfyolo/train.hpp"

namespace fs = std::filesystem;
using namespace lfyolo;

namespace {

enum Exit { kOk = 0, kValidation = 1, kIo = 2, kInternal = 3 };

ModelConfig config_from(const std::string& path) {
  return path.empty() ? ModelConfig::with_multiplier(1.0) : io::load_config(path);
}

void check_unit_interval(double v, const char* flag) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ValidationError(std::string(flag) + " must lie in [0, 1], got " + std::to_string(v));
  }
}

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const int s = std::stoi(text, &used);
      if (used == text.size()) return {s, s};
    } else {
      std::size_t used_h = 0;
      const int w = std::stoi(text.substr(0, x), &used);
      const int h = std::stoi(text.substr(x + 1), &used_h);
      if (used == x && used_h == text.size() - x - 1) return {w, h};
    }
  } catch (const std::exception&) {
  }
  throw ValidationError("--input-size: '" + text + "' is not N or WxH");
}

void apply_thread_cap() {
  const char* env = std::getenv("LF_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) {
    throw ValidationError(std::string("LF_THREADS must be a positive integer, got '") + env + "'");
  }
  kernels::set_num_threads(static_cast<int>(n));
}

Model load_model(const ModelConfig& cfg, const std::string& weights) {
  Model model = Model::build(cfg);
  io::load_weights(weights, model.params());
  return model;
}

// ----------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string config;
  std::string input_size;
  std::string csv;
  std::string convention = "mac";
  std::string block = "model";
  int c_in = 128;
  int c_out = 256;
};

int run_analyze(const AnalyzeArgs& a) {
  const FlopsConvention conv = parse_flops_convention(a.convention);
  ComplexityReport report;
  std::string title;
  if (a.block == "model") {
    const ModelConfig cfg = config_from(a.config);
    auto [w, h] = a.input_size.empty() ? std::pair{cfg.input_w, cfg.input_h}
                                       : parse_size(a.input_size);
    report = analyze_model(cfg, h, w);
    std::ostringstream t;
    t << "LF-YOLO C=" << cfg.width_C << " classes=" << cfg.num_classes;
    title = t.str();
  } else {
    auto [w, h] = a.input_size.empty() ? std::pair{208, 208} : parse_size(a.input_size);
    if (a.block == "efe") {
      report = analyze_efe(EfeSpec{a.c_in, a.c_out}, h, w);
    } else if (a.block == "residual") {
      report = analyze_residual_ref(ResidualRefSpec{a.c_in, a.c_out}, h, w);
    } else {
      throw ValidationError("--block must be model, efe or residual, got '" + a.block + "'");
    }
    title = a.block + " " + std::to_string(a.c_in) + "->" + std::to_string(a.c_out);
  }
  std::cout << render_table(report, conv, title);
  if (!a.csv.empty()) io::write_file_atomic(a.csv, render_csv(report));
  return kOk;
}

// ------------------------------------------------------------------- infer

struct InferArgs {
  std::string config;
  std::string weights;
  std::string image;
  std::string out;
  std::optional<double> conf;
  std::optional<double> nms_iou;
};

int run_infer(const InferArgs& a) {
  const ModelConfig cfg = config_from(a.config);
  const double conf = a.conf.value_or(cfg.conf_threshold);
  const double nms_iou = a.nms_iou.value_or(cfg.nms_iou);
  check_unit_interval(conf, "--conf");
  check_unit_interval(nms_iou, "--nms-iou");

  Model model = load_model(cfg, a.weights);
  const io::Image original = io::read_image(a.image);
  const Tensor input =
      io::resize_bilinear(io::image_to_tensor(original), cfg.input_h, cfg.input_w);
  std::vector<Detection> dets = detect(model, input, conf, nms_iou);

  const double sx = static_cast<double>(original.width) / cfg.input_w;
  const double sy = static_cast<double>(original.height) / cfg.input_h;
  for (Detection& d : dets) {
    d.box = Box{d.box.x_min * sx, d.box.y_min * sy, d.box.x_max * sx, d.box.y_max * sy};
    std::printf("%d %.6f %.2f %.2f %.2f %.2f\n", d.class_id, d.score, d.box.x_min,
                d.box.y_min, d.box.x_max, d.box.y_max);
  }
  if (!a.out.empty()) io::save_annotated_image(original, dets, a.out);
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out_dir;
  std::string loss_weights;
  int epochs = 500;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int batch = 8;
};

LossWeights parse_loss_weights(const std::string& text) {
  LossWeights w;
  if (text.empty()) return w;
  double v[3];
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lf,%lf,%lf%c", &v[0], &v[1], &v[2], &tail) != 3 ||
      v[0] < 0 || v[1] < 0 || v[2] < 0) {
    throw ValidationError("--loss-weights expects three non-negative numbers obj,cls,box");
  }
  return {v[0], v[1], v[2]};
}

int run_train(const TrainArgs& a) {
  const ModelConfig cfg = config_from(a.config);
  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.lr = a.lr;
  opt.seed = a.seed;
  opt.batch_size = a.batch;
  opt.loss_weights = parse_loss_weights(a.loss_weights);
  if (opt.epochs < 1) throw ValidationError("--epochs must be >= 1");
  if (opt.batch_size < 1) throw ValidationError("--batch must be >= 1");
  if (!(opt.lr >= 0.0)) throw ValidationError("--lr must be >= 0");

  int last_epoch = -1;
  double epoch_sum = 0.0;
  int epoch_steps = 0;
  auto flush = [&] {
    if (epoch_steps > 0) {
      std::printf("epoch %d loss %.6f\n", last_epoch, epoch_sum / epoch_steps);
      std::fflush(stdout);
    }
  };
  opt.on_step = [&](const LossLogRow& row) {
    if (row.epoch != last_epoch) {
      flush();
      last_epoch = row.epoch;
      epoch_sum = 0.0;
      epoch_steps = 0;
    }
    epoch_sum += row.loss.total;
    ++epoch_steps;
    return true;
  };
  const TrainRun run = train_from_manifest(a.manifest, cfg, opt, a.out_dir);
  flush();
  for (const auto& s : run.skipped) std::cerr << "warning: skipped " << s << "\n";
  if (!run.skipped.empty()) std::cerr << "warning: " << run.skipped.size() << " samples skipped\n";
  std::printf("best epoch %d loss %.6f\n", run.result.best_epoch, run.result.best_epoch_loss);
  std::printf("wrote %s\n", (fs::path(a.out_dir) / "weights_final.lfyw").string().c_str());
  return kOk;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string config;
  std::string manifest;
  std::string weights;
  std::string csv;
  double conf = 0.001;
  std::optional<double> nms_iou;
};

int run_eval(const EvalArgs& a) {
  const ModelConfig cfg = config_from(a.config);
  check_unit_interval(a.conf, "--conf");
  const double nms_iou = a.nms_iou.value_or(cfg.nms_iou);
  check_unit_interval(nms_iou, "--nms-iou");
  Model model = load_model(cfg, a.weights);
  const DatasetLoad data = load_dataset(a.manifest, cfg);
  for (const auto& s : data.skipped) std::cerr << "warning: skipped " << s << "\n";
  if (data.samples.empty()) throw IoError(a.manifest + ": no usable samples");

  std::vector<EvalRecord> records;
  for (const TrainSample& s : data.samples) {
    EvalRecord r;
    r.image_id = s.id;
    r.detections = detect(model, s.image, a.conf, nms_iou);
    for (const io::AnnotatedBox& b : s.boxes) {
      r.truths.push_back({b.class_id, b.to_box(cfg.input_w, cfg.input_h)});
    }
    records.push_back(std::move(r));
  }
  const MapResult result = map50(records, cfg.num_classes);
  for (int c = 0; c < cfg.num_classes; ++c) {
    if (!result.per_class[c]) std::cerr << "notice: class " << c << " has no ground truth, skipped\n";
  }
  std::cout << render_map_table(result);
  if (!a.csv.empty()) io::write_file_atomic(a.csv, render_map_csv(result));
  return kOk;
}

// --------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::string blocks;
  bool corrupt = false;
};

int run_gradcheck_cmd(const GradcheckArgs& a) {
  std::vector<std::string> blocks;
  if (a.blocks.empty() || a.blocks == "all") {
    blocks = gradcheck_blocks();
  } else {
    std::stringstream ss(a.blocks);
    std::string b;
    while (std::getline(ss, b, ',')) {
      if (!b.empty()) blocks.push_back(b);
    }
  }
  bool all_passed = true;
  for (const auto& b : blocks) {
    const GradcheckResult r = run_gradcheck(b, a.seed, a.corrupt);
    std::printf("%-11s max_rel_err %.3e tol %.0e %s\n", r.block.c_str(), r.max_rel_error,
                r.tolerance, r.passed ? "PASS" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  return all_passed ? kOk : kValidation;
}

// ---------------------------------------------------------------- features

struct FeaturesArgs {
  std::string config;
  std::string weights;
  std::string image;
  std::string layer;
  std::string out;
  std::uint64_t seed = 0;
};

int run_features(const FeaturesArgs& a) {
  const ModelConfig cfg = config_from(a.config);
  Model model = Model::build(cfg);
  const auto names = model.stage_names();
  if (std::find(names.begin(), names.end(), a.layer) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : " ") + n;
    throw ValidationError("unknown layer '" + a.layer + "'; valid layers: " + valid);
  }
  if (a.weights.empty()) {
    model.initialize(a.seed);
  } else {
    io::load_weights(a.weights, model.params());
  }
  const Tensor input = io::load_image(a.image, cfg.input_h, cfg.input_w);
  Tensor captured;
  model.forward(ad::Var(input), ForwardContext{false},
                [&](const std::string& stage, const ad::Var& out) {
                  if (stage == a.layer) captured = out.value();
                });
  io::save_feature_grid(captured, a.out);
  std::printf("%s: %d channels %dx%d -> %s\n", a.layer.c_str(), captured.shape().c,
              captured.shape().h, captured.shape().w, a.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lightweight weld-defect detector: analysis, training, evaluation, inference"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "Per-layer parameter and FLOPs accounting");
  an->add_option("--config", analyze.config, "Model config file (key = value)");
  an->add_option("--input-size", analyze.input_size, "Input size N or WxH");
  an->add_option("--csv", analyze.csv, "Write per-layer CSV here");
  an->add_option("--flops-convention", analyze.convention,
                 "mac: 1 FLOP per multiply-accumulate; madd: 2")
      ->check(CLI::IsMember({"mac", "madd"}));
  an->add_option("--block", analyze.block, "model, or a single efe / residual block")
      ->check(CLI::IsMember({"model", "efe", "residual"}));
  an->add_option("--c-in", analyze.c_in, "Block input channels")->check(CLI::PositiveNumber);
  an->add_option("--c-out", analyze.c_out, "Block output channels")->check(CLI::PositiveNumber);

  InferArgs infer;
  auto* in = app.add_subcommand("infer", "Detect objects in one image");
  in->add_option("--config", infer.config, "Model config file");
  in->add_option("--weights", infer.weights, "Weights file (.lfyw)")->required();
  in->add_option("--image", infer.image, "PNG or PGM image")->required();
  in->add_option("--conf", infer.conf, "Score threshold (strict >)");
  in->add_option("--nms-iou", infer.nms_iou, "NMS IoU threshold");
  in->add_option("--out", infer.out, "Write annotated PNG here");

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Train from a manifest of annotated images");
  tr->add_option("--config", train.config, "Model config file");
  tr->add_option("--manifest", train.manifest, "Image list, one path per line")->required();
  tr->add_option("--out-dir", train.out_dir, "Directory for weights and loss log")->required();
  tr->add_option("--epochs", train.epochs, "Epochs")->capture_default_str();
  tr->add_option("--lr", train.lr, "Initial learning rate")->capture_default_str();
  tr->add_option("--seed", train.seed, "Initialization seed")->capture_default_str();
  tr->add_option("--batch", train.batch, "Images per step")->capture_default_str();
  tr->add_option("--loss-weights", train.loss_weights, "obj,cls,box term weights (default 1,1,1)");

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Per-class AP50 and mAP50 on a manifest");
  ev->add_option("--config", eval.config, "Model config file");
  ev->add_option("--manifest", eval.manifest, "Image list")->required();
  ev->add_option("--weights", eval.weights, "Weights file")->required();
  ev->add_option("--conf", eval.conf, "Score threshold (strict >)")->capture_default_str();
  ev->add_option("--nms-iou", eval.nms_iou, "NMS IoU threshold");
  ev->add_option("--csv", eval.csv, "Write class,AP50 CSV here");

  GradcheckArgs grad;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--seed", grad.seed, "Seed for inputs and parameters")->capture_default_str();
  gc->add_option("--blocks", grad.blocks, "Comma-separated subset (default: all)");
  gc->add_flag("--corrupt-grad", grad.corrupt, "Perturb analytic gradients")->group("");

  FeaturesArgs feat;
  auto* fe = app.add_subcommand("features", "Save a stage's feature maps as a channel grid");
  fe->add_option("--config", feat.config, "Model config file");
  fe->add_option("--weights", feat.weights, "Weights file (default: seeded initialization)");
  fe->add_option("--seed", feat.seed, "Initialization seed without --weights")->capture_default_str();
  fe->add_option("--image", feat.image, "Input image")->required();
  fe->add_option("--layer", feat.layer, "Backbone stage s1..s20")->required();
  fe->add_option("--out", feat.out, "Output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return kOk;
    const auto parsed = app.get_subcommands();
    std::cerr << (parsed.empty() ? app.help() : parsed.front()->help());
    return kValidation;
  }

  try {
    apply_thread_cap();
    if (*an) return run_analyze(analyze);
    if (*in) return run_infer(infer);
    if (*tr) return run_train(train);
    if (*ev) return run_eval(eval);
    if (*gc) return run_gradcheck_cmd(grad);
    if (*fe) return run_features(feat);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
