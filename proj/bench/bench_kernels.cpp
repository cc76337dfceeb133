#include <benchmark/benchmark.h>

#include <random>

#include "lfyolo/kernels.hpp"
#include "reference_kernels.hpp"

using namespace lfyolo;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Args: channels in, channels out, spatial size, kernel, groups.
struct ConvCase {
  Tensor input, weight, grad_out;
  kernels::ConvGeometry geom;

  explicit ConvCase(const benchmark::State& state) {
    const int c_in = static_cast<int>(state.range(0));
    const int c_out = static_cast<int>(state.range(1));
    const int hw = static_cast<int>(state.range(2));
    const int k = static_cast<int>(state.range(3));
    const int groups = static_cast<int>(state.range(4));
    geom = {1, k / 2, 1, groups};
    input = random_tensor({1, c_in, hw, hw}, 1);
    weight = random_tensor({c_out, c_in / groups, k, k}, 2);
    grad_out = random_tensor(kernels::conv2d_output_shape(input.shape(), weight.shape(), geom), 3);
  }

  double macs() const {
    return static_cast<double>(weight.numel()) * grad_out.shape().plane();
  }
};

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({32, 64, 40, 3, 1})->Args({64, 64, 40, 1, 1})->Args({64, 64, 40, 3, 64});
  b->Unit(benchmark::kMillisecond);
}

void BM_Conv2dForward_OpenMP(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d(c.input, c.weight, {}, c.geom));
  state.counters["MAC/s"] = benchmark::Counter(c.macs(), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward_OpenMP)->Apply(conv_args);

void BM_Conv2dForward_Reference(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    benchmark::DoNotOptimize(reference::conv2d_direct(c.input, c.weight, {}, c.geom));
  }
  state.counters["MAC/s"] = benchmark::Counter(c.macs(), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward_Reference)->Apply(conv_args);

void BM_Conv2dBackwardInput_OpenMP(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        kernels::conv2d_backward_input(c.grad_out, c.weight, c.input.shape(), c.geom));
  }
}
BENCHMARK(BM_Conv2dBackwardInput_OpenMP)->Apply(conv_args);

void BM_Conv2dBackwardInput_Reference(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    benchmark::DoNotOptimize(reference::conv2d_backward_input_direct(
        c.grad_out, c.weight, c.input.shape(), c.geom));
  }
}
BENCHMARK(BM_Conv2dBackwardInput_Reference)->Apply(conv_args);

void BM_Conv2dBackwardWeight_OpenMP(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        kernels::conv2d_backward_weight(c.grad_out, c.input, c.weight.shape(), c.geom));
  }
}
BENCHMARK(BM_Conv2dBackwardWeight_OpenMP)->Apply(conv_args);

void BM_Conv2dBackwardWeight_Reference(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    benchmark::DoNotOptimize(reference::conv2d_backward_weight_direct(
        c.grad_out, c.input, c.weight.shape(), c.geom));
  }
}
BENCHMARK(BM_Conv2dBackwardWeight_Reference)->Apply(conv_args);

void pool_args(benchmark::internal::Benchmark* b) {
  b->Args({64, 40, 5})->Args({64, 40, 13})->Unit(benchmark::kMillisecond);
}

void BM_MaxPool_OpenMP(benchmark::State& state) {
  const int k = static_cast<int>(state.range(2));
  const Tensor x = random_tensor({1, static_cast<int>(state.range(0)),
                                  static_cast<int>(state.range(1)),
                                  static_cast<int>(state.range(1))}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::maxpool2d(x, k, 1, k / 2));
}
BENCHMARK(BM_MaxPool_OpenMP)->Apply(pool_args);

void BM_MaxPool_Reference(benchmark::State& state) {
  const int k = static_cast<int>(state.range(2));
  const Tensor x = random_tensor({1, static_cast<int>(state.range(0)),
                                  static_cast<int>(state.range(1)),
                                  static_cast<int>(state.range(1))}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(reference::maxpool2d_direct(x, k, 1, k / 2));
}
BENCHMARK(BM_MaxPool_Reference)->Apply(pool_args);

}  // namespace

BENCHMARK_MAIN();
