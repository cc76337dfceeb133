#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lfyolo/autodiff.hpp"
#include "lfyolo/params.hpp"

namespace lfyolo {

struct ForwardContext {
  bool training = false;
};

inline constexpr double kLeakySlope = 0.1;

// ------------------------------------------------------- layer descriptors

enum class LayerKind { kConv, kBatchNorm, kMaxPool, kUpsample };

/// One primitive layer of a block, with the spatial size it produces at the
/// resolution it was described for. Conv and batch-norm layers own the
/// parameters `path.*`.
struct LayerDesc {
  std::string path;
  LayerKind kind = LayerKind::kConv;
  int c_in = 0;
  int c_out = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
  bool bias = false;
  int out_h = 0;
  int out_w = 0;

  std::int64_t conv_weights() const;
  std::int64_t params() const;
  /// Multiply-accumulates; zero for everything but convolutions.
  std::int64_t macs() const;
};

using LayerList = std::vector<LayerDesc>;

/// Creates every parameter the descriptors own (BN: gamma 1, beta 0,
/// running mean 0, running var 1; conv tensors zero).
void allocate_params(const LayerList& layers, ParamStore& store);

/// He-normal conv weights in name order; biases and BN untouched.
void init_conv_weights(ParamStore& store, std::uint64_t seed);

// ------------------------------------------------------------------- specs

/// Conv (no bias) -> BatchNorm -> LeakyReLU(0.1).
struct CblSpec {
  int c_in = 0;
  int c_out = 0;
  int kernel = 1;
  int stride = 1;

  void validate() const;
};

/// Ghost convolution: a primary convolution yields b = c_out / s intrinsic
/// maps, a depthwise (optionally dilated) cheap operation derives s - 1
/// ghosts from each, and BN + LeakyReLU run over the concatenation.
struct GhostSpec {
  int c_in = 0;
  int c_out = 0;
  int ratio_s = 2;
  int primary_kernel = 1;
  int cheap_kernel = 3;
  int dilation = 1;

  int intrinsic() const { return c_out / ratio_s; }
  int ghosts() const { return intrinsic() * (ratio_s - 1); }
  void validate() const;
};

struct EfeSpec {
  int c_in = 0;
  int c_out = 0;  // also the expansion width m
  double split_ratio = 0.25;

  int expansion() const { return c_out; }
  int identity_channels() const;
  int transform_channels() const { return expansion() - identity_channels(); }
  int dense_growth() const { return expansion() / 2; }
  void validate() const;
};

struct RmfSpec {
  int c_in = 0;
  std::vector<int> pool_kernels{1, 5, 9, 13};
  std::vector<int> dilations{1, 5, 9};
  double branch_ratio = 0.5;

  int branch_channels() const;
  int c_out() const {
    return static_cast<int>(pool_kernels.size() * dilations.size()) *
           branch_channels();
  }
  GhostSpec gd_spec(int dilation) const;
  void validate() const;
};

/// The darknet residual stage used for comparison: 3x3 conv c_in -> c_out
/// (stride 1) followed by one {1x1 c_out -> c_in, 3x3 c_in -> c_out, add}
/// unit, all in CBL form.
struct ResidualRefSpec {
  int c_in = 128;
  int c_out = 256;
};

// ------------------------------------------------------------ descriptions
// Each returns the output dims (n = 1) and appends its layers.

Shape describe(const CblSpec& spec, const std::string& prefix, Shape in,
               LayerList& out);
Shape describe(const GhostSpec& spec, const std::string& prefix, Shape in,
               LayerList& out);
Shape describe(const EfeSpec& spec, const std::string& prefix, Shape in,
               LayerList& out);
Shape describe(const RmfSpec& spec, const std::string& prefix, Shape in,
               LayerList& out);
Shape describe(const ResidualRefSpec& spec, const std::string& prefix,
               Shape in, LayerList& out);

// ---------------------------------------------------------------- forward

ad::Var cbl(const ad::Var& x, const CblSpec& spec, const LayerParams& params,
            const ForwardContext& ctx);
ad::Var ghost_conv(const ad::Var& x, const GhostSpec& spec,
                   const LayerParams& params, const ForwardContext& ctx);
/// Ghost convolution with a dilated cheap operation; dilation 1 is exactly
/// ghost_conv.
ad::Var gd_conv(const ad::Var& x, const GhostSpec& spec,
                const LayerParams& params, const ForwardContext& ctx);
ad::Var efe(const ad::Var& x, const EfeSpec& spec, const LayerParams& params,
            const ForwardContext& ctx);
ad::Var rmf(const ad::Var& x, const RmfSpec& spec, const LayerParams& params,
            const ForwardContext& ctx);
ad::Var yolov3_residual_ref(const ad::Var& x, const ResidualRefSpec& spec,
                            const LayerParams& params,
                            const ForwardContext& ctx);

/// Bare convolution with bias (prediction projections).
ad::Var conv_bias(const ad::Var& x, const LayerParams& params, int kernel);

}  // namespace lfyolo
