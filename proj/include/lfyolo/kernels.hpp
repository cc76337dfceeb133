#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lfyolo/tensor.hpp"

// Data-parallel forward/backward kernels. Every kernel writes disjoint output
// elements per OpenMP iteration and accumulates each element in a fixed
// order, so results are bit-identical for any thread count.
namespace lfyolo::kernels {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

/// Validates input/weight compatibility and returns the output dims.
/// Weight dims are (c_out, c_in_per_group, k_h, k_w).
Shape conv2d_output_shape(const Shape& input, const Shape& weight,
                          const ConvGeometry& geom);

/// Dilated, strided, grouped cross-correlation. `bias` is empty or c_out long.
Tensor conv2d(const Tensor& input, const Tensor& weight,
              std::span<const double> bias, const ConvGeometry& geom);

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& input_shape,
                             const ConvGeometry& geom);

Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& input,
                              const Shape& weight_shape,
                              const ConvGeometry& geom);

std::vector<double> conv2d_backward_bias(const Tensor& grad_out);

struct MaxPoolResult {
  Tensor output;
  // Per output element, the flat in-plane index of the selected input.
  std::vector<std::int32_t> argmax;
};

Shape maxpool2d_output_shape(const Shape& input, int kernel, int stride,
                             int padding);

/// Padding behaves as -inf, so padded taps are never selected.
MaxPoolResult maxpool2d(const Tensor& input, int kernel, int stride,
                        int padding);

Tensor maxpool2d_backward(const Tensor& grad_out,
                          std::span<const std::int32_t> argmax,
                          const Shape& input_shape);

/// Per-channel mean and biased variance over (n, h, w).
void channel_moments(const Tensor& input, std::vector<double>& mean,
                     std::vector<double>& var);

/// y = (x - mean[c]) * inv_std[c] * gamma[c] + beta[c]; also returns x_hat.
Tensor batchnorm_apply(const Tensor& input, std::span<const double> mean,
                       std::span<const double> inv_std,
                       std::span<const double> gamma,
                       std::span<const double> beta, Tensor* x_hat);

Tensor upsample_nearest_2x(const Tensor& input);
Tensor upsample_nearest_2x_backward(const Tensor& grad_out);

/// Caps the OpenMP team size; values < 1 are ignored.
void set_num_threads(int n);
int max_threads();

}  // namespace lfyolo::kernels
