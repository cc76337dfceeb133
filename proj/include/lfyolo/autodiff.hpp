#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "lfyolo/kernels.hpp"
#include "lfyolo/tensor.hpp"

namespace lfyolo::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  // Receives this node's gradient and accumulates into the operands.
  std::function<void(const Tensor&)> backward;

  void accumulate(const Tensor& g);
};

/// Handle to a value that may take part in reverse-mode differentiation.
/// Copies share the underlying node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  /// Accumulated gradient, or zeros of the value's dims if none arrived.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of executed operators. Operators record onto the tape
/// active on the calling thread; with no active tape nothing is recorded.
class GradTape {
 public:
  class Recording {
   public:
    explicit Recording(GradTape* tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    GradTape* previous_;
  };

  [[nodiscard]] Recording record() { return Recording(this); }
  static GradTape* active();

  void push(std::shared_ptr<Node> node) { ops_.push_back(std::move(node)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the record in reverse.
  void backward(const Var& loss);

 private:
  std::vector<std::shared_ptr<Node>> ops_;
};

void backward(GradTape& tape, const Var& loss);

/// Records `value` as the result of an operator over `inputs` if any input
/// requires a gradient and a tape is active. `make_backward` is invoked only
/// in that case and returns the closure stored on the node.
Var record(Tensor value, std::span<const Var> inputs,
           const std::function<std::function<void(const Tensor&)>()>&
               make_backward);

// ---------------------------------------------------------------- operators

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
           const kernels::ConvGeometry& geom);

Var maxpool2d(const Var& input, int kernel, int stride, int padding);

/// Stride-1 pooling whose output keeps the input's spatial dims. Even
/// kernels cannot do this and raise ConfigError.
Var maxpool2d_same(const Var& input, int kernel);

struct BatchNormState {
  Var gamma;
  Var beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Inference mode normalizes with running statistics; training mode uses
/// batch statistics over (n, h, w) and updates the running ones.
Var batchnorm(const Var& input, const BatchNormState& state, bool training);

enum class ActivationKind { kLeakyRelu, kSigmoid };

Var leaky_relu(const Var& input, double slope);
Var sigmoid(const Var& input);
Var activation(const Var& input, ActivationKind kind, double slope = 0.1);

Var concat_channels(std::span<const Var> inputs);
Var add(const Var& a, const Var& b);
Var upsample_nearest_2x(const Var& input);

enum class CombineKind { kConcatChannels, kAdd, kUpsampleNearest2x };
Var combine(std::span<const Var> inputs, CombineKind kind);

Var slice_channels(const Var& input, int begin, int count);

/// Scalar sum of all elements.
Var sum(const Var& input);
/// Scalar sum of input * weights (weights constant).
Var weighted_sum(const Var& input, const Tensor& weights);

// ------------------------------------------------------ gradient checking

struct FiniteDiffOptions {
  double step = 1e-5;
  // Coordinates checked per leaf; 0 checks all of them.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
  // Also difference at 10 * step and step / 10 and keep the closest
  // estimate: the larger step limits cancellation on nearly linear maps, the
  // smaller one keeps a kink (ReLU-type, pooling tie) lying within `step` of
  // the point from being taken for a gradient error.
  bool refine = true;
  // Test hook: perturbs the analytic gradient so a check must fail.
  bool corrupt_analytic = false;
};

/// Max over checked coordinates of |analytic - central| /
/// max(|analytic|, |central|, 1e-12) for a scalar function of `leaves`.
/// `fn` must be deterministic; a mismatch between two evaluations at the
/// same point raises ContractError.
double finite_diff_check(const std::function<Var()>& fn,
                         std::span<Var> leaves,
                         const FiniteDiffOptions& options = {});

/// Convenience form for a tensor-to-scalar map.
double finite_diff_check(const std::function<Var(const Var&)>& fn,
                         const Tensor& input, double step);

}  // namespace lfyolo::ad
