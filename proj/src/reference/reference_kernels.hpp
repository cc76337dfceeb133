#pragma once

#include <span>

#include "lfyolo/kernels.hpp"
#include "lfyolo/tensor.hpp"

// Serial, textbook-form kernels. They share no loop structure with the
// OpenMP kernels and exist to check them (tests) and to time them (bench).
namespace lfyolo::reference {

Tensor conv2d_direct(const Tensor& input, const Tensor& weight,
                     std::span<const double> bias,
                     const kernels::ConvGeometry& geom);

/// Gather form: each input-gradient element sums every (co, kh, kw) tap
/// that read it.
Tensor conv2d_backward_input_direct(const Tensor& grad_out,
                                    const Tensor& weight,
                                    const Shape& input_shape,
                                    const kernels::ConvGeometry& geom);

Tensor conv2d_backward_weight_direct(const Tensor& grad_out,
                                     const Tensor& input,
                                     const Shape& weight_shape,
                                     const kernels::ConvGeometry& geom);

Tensor maxpool2d_direct(const Tensor& input, int kernel, int stride,
                        int padding);

}  // namespace lfyolo::reference
