#include "lfyolo/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

bool decays(ParamKind kind) { return kind == ParamKind::kConvWeight; }

Tensor stack_images(const std::vector<TrainSample>& samples, std::size_t begin,
                    std::size_t end) {
  const Shape one = samples[begin].image.shape();
  Tensor out(Shape{static_cast<int>(end - begin), one.c, one.h, one.w});
  auto dst = out.data();
  std::size_t offset = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor& img = samples[i].image;
    if (!(img.shape() == one)) {
      throw ShapeError("sample '" + samples[i].id + "' has dims " + img.shape().str() +
                       ", expected " + one.str());
    }
    for (double v : img.data()) dst[offset++] = v;
  }
  return out;
}

}  // namespace

void sgd_step(ParamStore& params, OptimState& state) {
  for (auto& [name, p] : params) {
    if (!p.trainable() || !p.var.has_grad()) continue;
    if (!p.var.node()->grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  for (auto& [name, p] : params) {
    if (!p.trainable() || !p.var.has_grad()) continue;
    const auto g = p.var.node()->grad.data();
    auto w = p.value().data();
    auto it = state.velocity.find(name);
    if (it == state.velocity.end()) {
      it = state.velocity.emplace(name, Tensor(p.value().shape(), 0.0)).first;
    }
    auto v = it->second.data();
    const double wd = decays(p.kind) ? state.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.momentum * v[i] + (g[i] + wd * w[i]);
      w[i] -= state.lr * v[i];
    }
  }
}

double scheduled_lr(double base_lr, int epoch, int epochs) {
  if (static_cast<long>(epoch) * 10 >= static_cast<long>(epochs) * 9) return base_lr * 0.01;
  if (static_cast<long>(epoch) * 10 >= static_cast<long>(epochs) * 8) return base_lr * 0.1;
  return base_lr;
}

TrainResult train(Model& model, const std::vector<TrainSample>& samples,
                  const TrainOptions& options) {
  if (samples.empty()) throw ValidationError("train: no samples");
  if (options.epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (options.batch_size < 1) throw ValidationError("train: batch size must be >= 1");
  if (!(options.lr >= 0.0) || !std::isfinite(options.lr)) {
    throw ValidationError("train: learning rate must be finite and >= 0");
  }

  const ModelConfig& cfg = model.config();
  ParamStore& params = model.params();
  OptimState state;
  TrainResult result;
  result.best_epoch_loss = std::numeric_limits<double>::infinity();
  const std::size_t batch = static_cast<std::size_t>(options.batch_size);

  int step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    state.lr = scheduled_lr(options.lr, epoch, options.epochs);
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += batch) {
      const std::size_t end = std::min(samples.size(), begin + batch);
      const Tensor images = stack_images(samples, begin, end);
      std::vector<std::vector<io::AnnotatedBox>> boxes;
      for (std::size_t i = begin; i < end; ++i) boxes.push_back(samples[i].boxes);
      const TargetMap targets = assign_targets(boxes, cfg);

      params.zero_grad();
      ad::GradTape tape;
      LossResult loss;
      {
        auto recording = tape.record();
        const auto heads = model.forward(ad::Var(images), ForwardContext{true});
        loss = total_loss(heads, targets, cfg, options.loss_weights);
      }
      tape.backward(loss.total);
      sgd_step(params, state);

      LossLogRow row{epoch, step++, loss.parts, state.lr};
      result.log.push_back(row);
      epoch_sum += loss.parts.total;
      ++epoch_steps;
      if (options.on_step && !options.on_step(row)) return result;
    }
    const double epoch_loss = epoch_sum / epoch_steps;
    if (epoch_loss < result.best_epoch_loss) {
      result.best_epoch_loss = epoch_loss;
      result.best_epoch = epoch;
      result.best_weights = io::serialize_weights(params);
    }
  }
  return result;
}

std::string format_loss_log(const std::vector<LossLogRow>& log) {
  std::string out = "epoch,step,l_obj,l_cls,l_box,l_total,lr\n";
  char buf[256];
  for (const LossLogRow& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step,
                  r.loss.obj, r.loss.cls, r.loss.box, r.loss.total, r.lr);
    out += buf;
  }
  return out;
}

DatasetLoad load_dataset(const std::filesystem::path& manifest, const ModelConfig& config) {
  DatasetLoad out;
  for (const auto& path : io::load_manifest(manifest)) {
    try {
      TrainSample s;
      s.id = path.string();
      s.image = io::load_image(path, config.input_h, config.input_w);
      s.boxes = io::load_annotations(io::annotation_path_for(path), config.num_classes);
      out.samples.push_back(std::move(s));
    } catch (const Error& e) {
      out.skipped.push_back(e.what());
    }
  }
  return out;
}

TrainRun train_from_manifest(const std::filesystem::path& manifest,
                             const ModelConfig& config, const TrainOptions& options,
                             const std::filesystem::path& out_dir) {
  DatasetLoad data = load_dataset(manifest, config);
  if (data.samples.empty()) {
    throw IoError(manifest.string() + ": no usable samples (" +
                  std::to_string(data.skipped.size()) + " skipped)");
  }
  std::filesystem::create_directories(out_dir);
  Model model = Model::build(config);
  model.initialize(options.seed);
  TrainRun run;
  run.skipped = std::move(data.skipped);
  run.result = train(model, data.samples, options);
  io::save_weights(model.params(), out_dir / "weights_final.lfyw");
  if (!run.result.best_weights.empty()) {
    io::write_file_atomic(out_dir / "weights_best.lfyw", run.result.best_weights);
  }
  io::write_file_atomic(out_dir / "loss_log.csv", format_loss_log(run.result.log));
  return run;
}

}  // namespace lfyolo
