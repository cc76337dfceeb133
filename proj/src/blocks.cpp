#include "lfyolo/blocks.hpp"

#include <cmath>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

int whole_channels(double value, const std::string& what) {
  const double r = std::round(value);
  if (std::abs(value - r) > 1e-9 || r < 1) {
    throw ConfigError(what + " = " + std::to_string(value) +
                      " is not a whole positive channel count");
  }
  return static_cast<int>(r);
}

Shape add_conv(LayerList& out, const std::string& path, Shape in, int c_out,
               int kernel, int stride, int padding, int dilation, int groups,
               bool bias) {
  LayerDesc d;
  d.path = path;
  d.kind = LayerKind::kConv;
  d.c_in = in.c;
  d.c_out = c_out;
  d.kernel = kernel;
  d.stride = stride;
  d.padding = padding;
  d.dilation = dilation;
  d.groups = groups;
  d.bias = bias;
  const Shape os = kernels::conv2d_output_shape(
      Shape{1, in.c, in.h, in.w}, Shape{c_out, in.c / groups, kernel, kernel},
      {stride, padding, dilation, groups});
  d.out_h = os.h;
  d.out_w = os.w;
  out.push_back(d);
  return os;
}

void add_bn(LayerList& out, const std::string& path, Shape in) {
  LayerDesc d;
  d.path = path;
  d.kind = LayerKind::kBatchNorm;
  d.c_in = d.c_out = in.c;
  d.out_h = in.h;
  d.out_w = in.w;
  out.push_back(d);
}

void expect_channels(const ad::Var& x, int channels, const LayerParams& lp) {
  if (x.shape().c != channels) {
    throw ShapeError(lp.prefix() + ": input " + x.shape().str() + " has " +
                     std::to_string(x.shape().c) + " channels, block expects " +
                     std::to_string(channels));
  }
}

ad::Var conv_nobias(const ad::Var& x, const LayerParams& lp,
                    const kernels::ConvGeometry& geom) {
  return ad::conv2d(x, lp.at("weight").var, std::nullopt, geom);
}

ad::Var bn_act(const ad::Var& x, const LayerParams& bn,
               const ForwardContext& ctx) {
  ad::BatchNormState st;
  st.gamma = bn.at("gamma").var;
  st.beta = bn.at("beta").var;
  st.running_mean = &bn.at("running_mean").value();
  st.running_var = &bn.at("running_var").value();
  return ad::leaky_relu(ad::batchnorm(x, st, ctx.training), kLeakySlope);
}

}  // namespace

std::int64_t LayerDesc::conv_weights() const {
  if (kind != LayerKind::kConv) return 0;
  return static_cast<std::int64_t>(c_out) * (c_in / groups) * kernel * kernel;
}

std::int64_t LayerDesc::params() const {
  switch (kind) {
    case LayerKind::kConv:
      return conv_weights() + (bias ? c_out : 0);
    case LayerKind::kBatchNorm:
      return 4LL * c_out;
    default:
      return 0;
  }
}

std::int64_t LayerDesc::macs() const {
  if (kind != LayerKind::kConv) return 0;
  return conv_weights() * out_h * out_w;
}

void allocate_params(const LayerList& layers, ParamStore& store) {
  for (const LayerDesc& d : layers) {
    if (d.kind == LayerKind::kConv) {
      store.add(join_path(d.path, "weight"), ParamKind::kConvWeight,
                {d.c_out, d.c_in / d.groups, d.kernel, d.kernel});
      if (d.bias) store.add(join_path(d.path, "bias"), ParamKind::kConvBias, {d.c_out});
    } else if (d.kind == LayerKind::kBatchNorm) {
      store.add(join_path(d.path, "gamma"), ParamKind::kBnGamma, {d.c_out});
      store.add(join_path(d.path, "beta"), ParamKind::kBnBeta, {d.c_out});
      store.add(join_path(d.path, "running_mean"), ParamKind::kBnRunningMean, {d.c_out});
      store.add(join_path(d.path, "running_var"), ParamKind::kBnRunningVar, {d.c_out});
    }
  }
}

void init_conv_weights(ParamStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : store) {
    if (p.kind != ParamKind::kConvWeight) continue;
    const Shape s = p.value().shape();
    const double fan_in = static_cast<double>(s.c) * s.h * s.w;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : p.value().data()) v = dist(rng);
  }
}

// ------------------------------------------------------------------- specs

void CblSpec::validate() const {
  if (c_in < 1 || c_out < 1 || stride < 1) {
    throw ConfigError("CBL: channel counts and stride must be positive");
  }
  if (kernel < 1 || kernel % 2 == 0) {
    throw ConfigError("CBL: kernel must be odd, got " + std::to_string(kernel));
  }
}

void GhostSpec::validate() const {
  if (c_in < 1 || c_out < 1 || ratio_s < 1 || dilation < 1) {
    throw ConfigError("ghost conv: channel counts, ratio and dilation must be "
                      "positive");
  }
  if (c_out % ratio_s != 0) {
    throw ConfigError("ghost conv: c_out " + std::to_string(c_out) +
                      " is not divisible by ratio s=" + std::to_string(ratio_s));
  }
  if (primary_kernel % 2 == 0 || cheap_kernel % 2 == 0) {
    throw ConfigError("ghost conv: kernels must be odd for same padding");
  }
}

int EfeSpec::identity_channels() const {
  return whole_channels(split_ratio * expansion(), "EFE identity split r_a*m");
}

void EfeSpec::validate() const {
  if (c_in < 1 || c_out < 1) throw ConfigError("EFE: channel counts must be positive");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ConfigError("EFE: split ratio must lie in (0, 1)");
  }
  identity_channels();
  whole_channels(expansion() / 2.0, "EFE dense growth m/2");
  GhostSpec{transform_channels(), dense_growth()}.validate();
}

int RmfSpec::branch_channels() const {
  return whole_channels(branch_ratio * c_in, "RMF branch width r_b*c_in");
}

GhostSpec RmfSpec::gd_spec(int dilation) const {
  GhostSpec g;
  g.c_in = c_in;
  g.c_out = branch_channels();
  g.dilation = dilation;
  return g;
}

void RmfSpec::validate() const {
  if (c_in < 1) throw ConfigError("RMF: c_in must be positive");
  if (pool_kernels.empty() || dilations.empty()) {
    throw ConfigError("RMF: needs at least one pool kernel and one dilation");
  }
  for (int k : pool_kernels) {
    if (k < 1 || k % 2 == 0) {
      throw ConfigError("RMF: pool kernel " + std::to_string(k) + " must be odd");
    }
  }
  for (int d : dilations) gd_spec(d).validate();
}

// ------------------------------------------------------------ descriptions

Shape describe(const CblSpec& spec, const std::string& prefix, Shape in,
               LayerList& out) {
  spec.validate();
  in.c = spec.c_in;
  Shape os = add_conv(out, prefix + ".conv", in, spec.c_out, spec.kernel,
                      spec.stride, spec.kernel / 2, 1, 1, false);
  add_bn(out, prefix + ".bn", os);
  return os;
}

Shape describe(const GhostSpec& spec, const std::string& prefix, Shape in,
               LayerList& out) {
  spec.validate();
  in.c = spec.c_in;
  Shape os = add_conv(out, prefix + ".primary", in, spec.intrinsic(),
                      spec.primary_kernel, 1, spec.primary_kernel / 2, 1, 1,
                      false);
  if (spec.ratio_s > 1) {
    add_conv(out, prefix + ".cheap", os, spec.ghosts(), spec.cheap_kernel, 1,
             spec.dilation * (spec.cheap_kernel - 1) / 2, spec.dilation,
             spec.intrinsic(), false);
  }
  os.c = spec.c_out;
  add_bn(out, prefix + ".bn", os);
  return os;
}

Shape describe(const EfeSpec& spec, const std::string& prefix, Shape in,
               LayerList& out) {
  spec.validate();
  const int m = spec.expansion();
  const int t = spec.transform_channels();
  const int grow = spec.dense_growth();
  Shape e = describe(CblSpec{spec.c_in, m, 1, 1}, prefix + ".expand", in, out);
  describe(GhostSpec{t, grow}, prefix + ".gc1", e, out);
  describe(GhostSpec{t + grow, grow}, prefix + ".gc2", e, out);
  Shape merged = e;
  merged.c = 2 * m;
  return describe(CblSpec{2 * m, m, 1, 1}, prefix + ".compress", merged, out);
}

Shape describe(const RmfSpec& spec, const std::string& prefix, Shape in,
               LayerList& out) {
  spec.validate();
  in.c = spec.c_in;
  for (int k : spec.pool_kernels) {
    if (k > 1) {
      LayerDesc d;
      d.path = prefix + ".pool" + std::to_string(k);
      d.kind = LayerKind::kMaxPool;
      d.c_in = d.c_out = in.c;
      d.kernel = k;
      d.padding = (k - 1) / 2;
      d.out_h = in.h;
      d.out_w = in.w;
      out.push_back(d);
    }
    for (int dil : spec.dilations) {
      describe(spec.gd_spec(dil),
               prefix + ".p" + std::to_string(k) + ".d" + std::to_string(dil),
               in, out);
    }
  }
  Shape os = in;
  os.c = spec.c_out();
  return os;
}

Shape describe(const ResidualRefSpec& spec, const std::string& prefix,
               Shape in, LayerList& out) {
  Shape a = describe(CblSpec{spec.c_in, spec.c_out, 3, 1}, prefix + ".conv1", in, out);
  Shape b = describe(CblSpec{spec.c_out, spec.c_in, 1, 1}, prefix + ".reduce", a, out);
  return describe(CblSpec{spec.c_in, spec.c_out, 3, 1}, prefix + ".expand", b, out);
}

// ---------------------------------------------------------------- forward

ad::Var cbl(const ad::Var& x, const CblSpec& spec, const LayerParams& lp,
            const ForwardContext& ctx) {
  spec.validate();
  expect_channels(x, spec.c_in, lp);
  ad::Var y = conv_nobias(x, lp.sub("conv"),
                          {spec.stride, spec.kernel / 2, 1, 1});
  return bn_act(y, lp.sub("bn"), ctx);
}

ad::Var ghost_conv(const ad::Var& x, const GhostSpec& spec,
                   const LayerParams& lp, const ForwardContext& ctx) {
  spec.validate();
  expect_channels(x, spec.c_in, lp);
  ad::Var intrinsic = conv_nobias(x, lp.sub("primary"),
                                  {1, spec.primary_kernel / 2, 1, 1});
  if (spec.ratio_s == 1) return bn_act(intrinsic, lp.sub("bn"), ctx);
  ad::Var ghosts = conv_nobias(
      intrinsic, lp.sub("cheap"),
      {1, spec.dilation * (spec.cheap_kernel - 1) / 2, spec.dilation,
       spec.intrinsic()});
  const ad::Var parts[] = {intrinsic, ghosts};
  return bn_act(ad::concat_channels(parts), lp.sub("bn"), ctx);
}

ad::Var gd_conv(const ad::Var& x, const GhostSpec& spec,
                const LayerParams& lp, const ForwardContext& ctx) {
  return ghost_conv(x, spec, lp, ctx);
}

ad::Var efe(const ad::Var& x, const EfeSpec& spec, const LayerParams& lp,
            const ForwardContext& ctx) {
  spec.validate();
  expect_channels(x, spec.c_in, lp);
  const int m = spec.expansion();
  const int ident = spec.identity_channels();
  const int t = spec.transform_channels();
  const int grow = spec.dense_growth();

  ad::Var expanded = cbl(x, CblSpec{spec.c_in, m, 1, 1}, lp.sub("expand"), ctx);
  ad::Var identity = ad::slice_channels(expanded, 0, ident);
  ad::Var branch_in = ad::slice_channels(expanded, ident, t);
  ad::Var g1 = ghost_conv(branch_in, GhostSpec{t, grow}, lp.sub("gc1"), ctx);
  const ad::Var dense_in[] = {branch_in, g1};
  ad::Var g2 = ghost_conv(ad::concat_channels(dense_in), GhostSpec{t + grow, grow},
                          lp.sub("gc2"), ctx);
  // identity ++ (branch input ++ gc1 ++ gc2) = 2m channels
  const ad::Var merged[] = {identity, branch_in, g1, g2};
  ad::Var compressed = cbl(ad::concat_channels(merged),
                           CblSpec{2 * m, m, 1, 1}, lp.sub("compress"), ctx);
  return ad::add(compressed, expanded);
}

ad::Var rmf(const ad::Var& x, const RmfSpec& spec, const LayerParams& lp,
            const ForwardContext& ctx) {
  spec.validate();
  expect_channels(x, spec.c_in, lp);
  std::vector<ad::Var> outputs;
  outputs.reserve(spec.pool_kernels.size() * spec.dilations.size());
  for (int k : spec.pool_kernels) {
    ad::Var pooled = ad::maxpool2d_same(x, k);
    for (int dil : spec.dilations) {
      outputs.push_back(gd_conv(
          pooled, spec.gd_spec(dil),
          lp.sub("p" + std::to_string(k) + ".d" + std::to_string(dil)), ctx));
    }
  }
  // Concatenating the flattened (pool, dilation) list equals the nested
  // per-branch-then-across-branches concatenation.
  return ad::concat_channels(outputs);
}

ad::Var yolov3_residual_ref(const ad::Var& x, const ResidualRefSpec& spec,
                            const LayerParams& lp, const ForwardContext& ctx) {
  ad::Var a = cbl(x, CblSpec{spec.c_in, spec.c_out, 3, 1}, lp.sub("conv1"), ctx);
  ad::Var b = cbl(a, CblSpec{spec.c_out, spec.c_in, 1, 1}, lp.sub("reduce"), ctx);
  ad::Var c = cbl(b, CblSpec{spec.c_in, spec.c_out, 3, 1}, lp.sub("expand"), ctx);
  return ad::add(a, c);
}

ad::Var conv_bias(const ad::Var& x, const LayerParams& lp, int kernel) {
  return ad::conv2d(x, lp.at("weight").var, lp.at("bias").var,
                    {1, kernel / 2, 1, 1});
}

}  // namespace lfyolo
