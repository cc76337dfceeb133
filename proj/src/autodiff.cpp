#include "lfyolo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lfyolo/errors.hpp"

namespace lfyolo::ad {
namespace {

thread_local GradTape* g_active_tape = nullptr;

void feed(const Var& v, const Tensor& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

void feed(const Var& v, Tensor&& g) {
  if (!v.requires_grad()) return;
  Node& node = *v.node();
  if (node.grad.empty()) {
    node.grad = std::move(g);
  } else {
    node.grad += g;
  }
}

Tensor channel_vector(std::span<const double> v) {
  return Tensor(Shape{1, static_cast<int>(v.size()), 1, 1},
                std::vector<double>(v.begin(), v.end()));
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Tensor value, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

GradTape::Recording::Recording(GradTape* tape) : previous_(g_active_tape) {
  g_active_tape = tape;
}

GradTape::Recording::~Recording() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::backward(const Var& loss) {
  if (!loss) throw ContractError("backward: null loss");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got dims " +
                        loss.shape().str());
  }
  loss.node()->accumulate(Tensor(loss.shape(), 1.0));
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node.grad);
  }
}

void backward(GradTape& tape, const Var& loss) { tape.backward(loss); }

Var record(Tensor value, std::span<const Var> inputs,
           const std::function<std::function<void(const Tensor&)>()>&
               make_backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  GradTape* tape = GradTape::active();
  const bool needs_grad =
      tape != nullptr &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Var& v) { return v.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->backward = make_backward();
    tape->push(node);
  }
  return Var(std::move(node));
}

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
           const kernels::ConvGeometry& geom) {
  std::span<const double> b;
  if (bias) b = bias->value().data();
  Tensor out = kernels::conv2d(input.value(), weight.value(), b, geom);
  std::vector<Var> ins{input, weight};
  if (bias) ins.push_back(*bias);
  return record(std::move(out), ins, [&] {
    return [input, weight, bias, geom](const Tensor& g) {
      if (input.requires_grad()) {
        feed(input, kernels::conv2d_backward_input(g, weight.value(),
                                                   input.shape(), geom));
      }
      if (weight.requires_grad()) {
        feed(weight, kernels::conv2d_backward_weight(g, input.value(),
                                                     weight.shape(), geom));
      }
      if (bias && bias->requires_grad()) {
        const auto gb = kernels::conv2d_backward_bias(g);
        feed(*bias, Tensor(bias->shape(), gb));
      }
    };
  });
}

Var maxpool2d(const Var& input, int kernel, int stride, int padding) {
  auto pooled = kernels::maxpool2d(input.value(), kernel, stride, padding);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      std::move(pooled.argmax));
  const Var ins[] = {input};
  return record(std::move(pooled.output), ins, [&] {
    return [input, argmax](const Tensor& g) {
      feed(input, kernels::maxpool2d_backward(g, *argmax, input.shape()));
    };
  });
}

Var maxpool2d_same(const Var& input, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) {
    throw ConfigError("maxpool2d: same-size pooling needs an odd kernel, got " +
                      std::to_string(kernel));
  }
  if (kernel == 1) return input;
  return maxpool2d(input, kernel, 1, (kernel - 1) / 2);
}

Var batchnorm(const Var& input, const BatchNormState& st, bool training) {
  if (!(st.eps > 0.0)) {
    throw ConfigError("batchnorm: eps must be positive");
  }
  const Shape s = input.shape();
  const auto c = static_cast<std::size_t>(s.c);
  if (st.gamma.value().numel() != c || st.beta.value().numel() != c ||
      st.running_mean == nullptr || st.running_var == nullptr ||
      st.running_mean->numel() != c || st.running_var->numel() != c) {
    throw ShapeError("batchnorm: per-channel vectors do not match " +
                     std::to_string(s.c) + " channels");
  }

  std::vector<double> mean, var;
  if (training) {
    kernels::channel_moments(input.value(), mean, var);
    const double count = static_cast<double>(s.n) * s.h * s.w;
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    for (std::size_t i = 0; i < c; ++i) {
      double& rm = (*st.running_mean)[i];
      double& rv = (*st.running_var)[i];
      rm = (1.0 - st.momentum) * rm + st.momentum * mean[i];
      rv = (1.0 - st.momentum) * rv + st.momentum * var[i] * unbias;
    }
  } else {
    const auto rm = st.running_mean->data();
    const auto rv = st.running_var->data();
    mean.assign(rm.begin(), rm.end());
    var.assign(rv.begin(), rv.end());
    for (std::size_t i = 0; i < c; ++i) {
      if (var[i] < 0.0) {
        throw ValidationError("batchnorm: negative running variance");
      }
    }
  }
  std::vector<double> inv_std(c);
  for (std::size_t i = 0; i < c; ++i) inv_std[i] = 1.0 / std::sqrt(var[i] + st.eps);

  auto x_hat = std::make_shared<Tensor>();
  Tensor out = kernels::batchnorm_apply(input.value(), mean, inv_std,
                                        st.gamma.value().data(),
                                        st.beta.value().data(), x_hat.get());
  const Var ins[] = {input, st.gamma, st.beta};
  return record(std::move(out), ins, [&] {
    return [input, gamma = st.gamma, beta = st.beta, x_hat,
            inv_std = std::move(inv_std), training](const Tensor& g) {
      const Shape s = g.shape();
      const double count = static_cast<double>(s.n) * s.h * s.w;
      std::vector<double> sum_g(s.c, 0.0), sum_gx(s.c, 0.0);
#pragma omp parallel for schedule(static)
      for (int ch = 0; ch < s.c; ++ch) {
        double a = 0.0, b = 0.0;
        for (int n = 0; n < s.n; ++n) {
          const double* gp = g.plane(n, ch);
          const double* hp = x_hat->plane(n, ch);
          for (std::size_t i = 0; i < s.plane(); ++i) {
            a += gp[i];
            b += gp[i] * hp[i];
          }
        }
        sum_g[ch] = a;
        sum_gx[ch] = b;
      }
      if (input.requires_grad()) {
        Tensor gin(s);
        const auto gam = gamma.value().data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < s.n; ++n) {
          for (int ch = 0; ch < s.c; ++ch) {
            const double* gp = g.plane(n, ch);
            const double* hp = x_hat->plane(n, ch);
            double* ip = gin.plane(n, ch);
            const double scale = gam[ch] * inv_std[ch];
            if (training) {
              const double mg = sum_g[ch] / count;
              const double mgx = sum_gx[ch] / count;
              for (std::size_t i = 0; i < s.plane(); ++i)
                ip[i] = scale * (gp[i] - mg - hp[i] * mgx);
            } else {
              for (std::size_t i = 0; i < s.plane(); ++i) ip[i] = scale * gp[i];
            }
          }
        }
        feed(input, std::move(gin));
      }
      feed(gamma, channel_vector(sum_gx));
      feed(beta, channel_vector(sum_g));
    };
  });
}

Var leaky_relu(const Var& input, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) {
    throw ConfigError("leaky_relu: slope must lie in (0, 1)");
  }
  Tensor out(input.shape());
  const auto x = input.value().data();
  auto y = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  const Var ins[] = {input};
  return record(std::move(out), ins, [&] {
    return [input, slope](const Tensor& g) {
      Tensor gin(g.shape());
      const auto x = input.value().data();
      const auto gd = g.data();
      auto gi = gin.data();
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < x.size(); ++i)
        gi[i] = x[i] > 0.0 ? gd[i] : slope * gd[i];
      feed(input, std::move(gin));
    };
  });
}

Var sigmoid(const Var& input) {
  Tensor out(input.shape());
  const auto x = input.value().data();
  auto y = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    } else {
      const double e = std::exp(x[i]);
      y[i] = e / (1.0 + e);
    }
  }
  auto y_copy = std::make_shared<Tensor>(out);
  const Var ins[] = {input};
  return record(std::move(out), ins, [&] {
    return [input, y_copy](const Tensor& g) {
      Tensor gin(g.shape());
      const auto yd = y_copy->data();
      const auto gd = g.data();
      auto gi = gin.data();
      for (std::size_t i = 0; i < yd.size(); ++i)
        gi[i] = gd[i] * yd[i] * (1.0 - yd[i]);
      feed(input, std::move(gin));
    };
  });
}

Var activation(const Var& input, ActivationKind kind, double slope) {
  switch (kind) {
    case ActivationKind::kLeakyRelu:
      return leaky_relu(input, slope);
    case ActivationKind::kSigmoid:
      return sigmoid(input);
  }
  throw ContractError("activation: unknown kind");
}

Var concat_channels(std::span<const Var> inputs) {
  if (inputs.empty()) throw ShapeError("concat: no inputs");
  const Shape first = inputs[0].shape();
  int channels = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape s = inputs[i].shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat: input " + std::to_string(i) + " has dims " +
                       s.str() + ", expected (n, h, w) of input 0 " +
                       first.str());
    }
    channels += s.c;
  }
  Tensor out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (int n = 0; n < first.n; ++n) {
    int offset = 0;
    for (const Var& v : inputs) {
      const Shape s = v.shape();
      std::copy_n(v.value().plane(n, 0), s.c * plane, out.plane(n, offset));
      offset += s.c;
    }
  }
  std::vector<Var> ins(inputs.begin(), inputs.end());
  return record(std::move(out), ins, [&] {
    return [ins](const Tensor& g) {
      const Shape gs = g.shape();
      int offset = 0;
      for (const Var& v : ins) {
        const Shape s = v.shape();
        if (v.requires_grad()) {
          Tensor part(s);
          for (int n = 0; n < gs.n; ++n)
            std::copy_n(g.plane(n, offset), s.c * gs.plane(), part.plane(n, 0));
          feed(v, std::move(part));
        }
        offset += s.c;
      }
    };
  });
}

Var add(const Var& a, const Var& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("add: input 1 has dims " + b.shape().str() +
                     ", expected " + a.shape().str());
  }
  Tensor out = a.value();
  out += b.value();
  const Var ins[] = {a, b};
  return record(std::move(out), ins, [&] {
    return [a, b](const Tensor& g) {
      feed(a, g);
      feed(b, g);
    };
  });
}

Var upsample_nearest_2x(const Var& input) {
  const Var ins[] = {input};
  return record(kernels::upsample_nearest_2x(input.value()), ins, [&] {
    return [input](const Tensor& g) {
      feed(input, kernels::upsample_nearest_2x_backward(g));
    };
  });
}

Var combine(std::span<const Var> inputs, CombineKind kind) {
  switch (kind) {
    case CombineKind::kConcatChannels:
      return concat_channels(inputs);
    case CombineKind::kAdd:
      if (inputs.size() != 2) {
        throw ShapeError("add: expected 2 inputs, got " +
                         std::to_string(inputs.size()));
      }
      return add(inputs[0], inputs[1]);
    case CombineKind::kUpsampleNearest2x:
      if (inputs.size() != 1) {
        throw ShapeError("upsample: expected a single input, got " +
                         std::to_string(inputs.size()));
      }
      return upsample_nearest_2x(inputs[0]);
  }
  throw ContractError("combine: unknown kind");
}

Var slice_channels(const Var& input, int begin, int count) {
  const Shape s = input.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " +
                     s.str());
  }
  Tensor out(Shape{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    std::copy_n(input.value().plane(n, begin), count * s.plane(), out.plane(n, 0));
  const Var ins[] = {input};
  return record(std::move(out), ins, [&] {
    return [input, begin, count](const Tensor& g) {
      const Shape s = input.shape();
      Tensor gin(s);
      for (int n = 0; n < s.n; ++n)
        std::copy_n(g.plane(n, 0), count * s.plane(), gin.plane(n, begin));
      feed(input, std::move(gin));
    };
  });
}

Var sum(const Var& input) {
  double acc = 0.0;
  for (double v : input.value().data()) acc += v;
  const Var ins[] = {input};
  return record(Tensor::scalar(acc), ins, [&] {
    return [input](const Tensor& g) {
      feed(input, Tensor(input.shape(), g.item()));
    };
  });
}

Var weighted_sum(const Var& input, const Tensor& weights) {
  if (!(input.shape() == weights.shape())) {
    throw ShapeError("weighted_sum: weights " + weights.shape().str() +
                     " do not match input " + input.shape().str());
  }
  double acc = 0.0;
  const auto x = input.value().data();
  const auto w = weights.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i];
  const Var ins[] = {input};
  return record(Tensor::scalar(acc), ins, [&] {
    return [input, weights](const Tensor& g) {
      Tensor gin = weights;
      const double s = g.item();
      for (double& v : gin.data()) v *= s;
      feed(input, std::move(gin));
    };
  });
}

double finite_diff_check(const std::function<Var()>& fn,
                         std::span<Var> leaves,
                         const FiniteDiffOptions& opt) {
  if (!(opt.step > 0.0)) throw ContractError("finite_diff_check: step must be > 0");
  for (Var& leaf : leaves) {
    if (!leaf.requires_grad()) {
      throw ContractError("finite_diff_check: leaf does not require grad");
    }
    leaf.zero_grad();
  }

  GradTape tape;
  Var loss;
  {
    auto rec = tape.record();
    loss = fn();
  }
  tape.backward(loss);
  const double base = loss.value().item();

  auto evaluate = [&fn]() {
    GradTape::Recording off(nullptr);
    return fn().value().item();
  };
  if (const double again = evaluate(); again != base) {
    throw ContractError("finite_diff_check: function is not deterministic");
  }

  std::mt19937_64 rng(opt.seed);
  double worst = 0.0;
  for (Var& leaf : leaves) {
    const Tensor analytic = leaf.grad();
    const std::size_t total = leaf.value().numel();
    std::vector<std::size_t> coords(total);
    for (std::size_t i = 0; i < total; ++i) coords[i] = i;
    if (opt.max_coords_per_leaf > 0 && total > opt.max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      double& x = leaf.mutable_value()[i];
      const double orig = x;
      auto central = [&](double h) {
        x = orig + h;
        const double fp = evaluate();
        x = orig - h;
        const double fm = evaluate();
        x = orig;
        return (fp - fm) / (2.0 * h);
      };
      double a = analytic[i];
      if (opt.corrupt_analytic) a = 1.5 * a + 1e-3;
      auto rel = [a](double cd) {
        return std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-12});
      };
      double err = rel(central(opt.step));
      if (opt.refine) {
        err = std::min({err, rel(central(opt.step * 10.0)), rel(central(opt.step * 0.1))});
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Var(const Var&)>& fn,
                         const Tensor& input, double step) {
  Var leaf(input, true);
  Var leaves[] = {leaf};
  FiniteDiffOptions opt;
  opt.step = step;
  return finite_diff_check([&] { return fn(leaf); }, leaves, opt);
}

}  // namespace lfyolo::ad
