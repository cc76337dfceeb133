#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lfyolo/io.hpp"
#include "lfyolo/loss.hpp"
#include "lfyolo/model.hpp"
#include "lfyolo/params.hpp"

namespace lfyolo {

struct OptimState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::map<std::string, Tensor, std::less<>> velocity;
};

/// v <- momentum * v + (g + wd * w); w <- w - lr * v for every trainable
/// parameter that has a gradient. Batch-norm parameters and biases take no
/// weight decay. All gradients are checked before anything is updated; a
/// non-finite one raises NumericError naming the parameter.
void sgd_step(ParamStore& params, OptimState& state);

/// Base rate, x0.1 from 80% of the epochs, x0.01 from 90%.
double scheduled_lr(double base_lr, int epoch, int epochs);

struct TrainSample {
  std::string id;
  Tensor image;  // (1, 3, H, W) at the model input size
  std::vector<io::AnnotatedBox> boxes;
};

struct LossLogRow {
  int epoch = 0;
  int step = 0;
  LossComponents loss;
  double lr = 0.0;
};

struct TrainOptions {
  int epochs = 500;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int batch_size = 8;
  LossWeights loss_weights;
  // Called after every step; returning false stops training.
  std::function<bool(const LossLogRow&)> on_step;
};

struct TrainResult {
  std::vector<LossLogRow> log;
  double best_epoch_loss = 0.0;
  int best_epoch = -1;
  std::string best_weights;  // serialized parameters after the best epoch
};

/// Mini-batch SGD in dataset order, training-mode batch norm.
TrainResult train(Model& model, const std::vector<TrainSample>& samples,
                  const TrainOptions& options);

/// `epoch,step,l_obj,l_cls,l_box,l_total,lr`
std::string format_loss_log(const std::vector<LossLogRow>& log);

struct DatasetLoad {
  std::vector<TrainSample> samples;
  std::vector<std::string> skipped;  // "path: reason"
};

/// Loads every manifest entry with its annotation at the model input size;
/// unreadable entries are skipped and reported.
DatasetLoad load_dataset(const std::filesystem::path& manifest,
                         const ModelConfig& config);

struct TrainRun {
  TrainResult result;
  std::vector<std::string> skipped;
};

/// Builds and seeds the model, trains, and writes weights_final.lfyw,
/// weights_best.lfyw and loss_log.csv into `out_dir`.
TrainRun train_from_manifest(const std::filesystem::path& manifest,
                             const ModelConfig& config, const TrainOptions& options,
                             const std::filesystem::path& out_dir);

}  // namespace lfyolo
