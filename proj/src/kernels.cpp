#include "lfyolo/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "lfyolo/errors.hpp"

namespace lfyolo::kernels {
namespace {

// Output index range [lo, hi) whose tap `offset = k*d - p` lands inside
// [0, extent) for stride s.
struct Range {
  int lo;
  int hi;
};

Range valid_range(int offset, int stride, int extent, int out_extent) {
  // need 0 <= o*s + offset <= extent - 1
  int lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  int hi_incl = extent - 1 - offset;
  int hi = hi_incl < 0 ? 0 : hi_incl / stride + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight,
                          const ConvGeometry& g) {
  if (g.stride < 1 || g.dilation < 1 || g.groups < 1 || g.padding < 0) {
    throw ConfigError("conv2d: stride, dilation and groups must be positive "
                      "and padding non-negative");
  }
  if (weight.n % g.groups != 0) {
    throw ShapeError("conv2d: weight " + weight.str() + " has " +
                     std::to_string(weight.n) +
                     " output channels, not divisible by groups=" +
                     std::to_string(g.groups));
  }
  if (input.c != weight.c * g.groups) {
    throw ShapeError("conv2d: input " + input.str() + " has " +
                     std::to_string(input.c) + " channels but weight " +
                     weight.str() + " with groups=" +
                     std::to_string(g.groups) + " expects " +
                     std::to_string(weight.c * g.groups));
  }
  const int eff_h = g.dilation * (weight.h - 1) + 1;
  const int eff_w = g.dilation * (weight.w - 1) + 1;
  if (input.h + 2 * g.padding < eff_h || input.w + 2 * g.padding < eff_w) {
    throw ShapeError("conv2d: dilated kernel " + std::to_string(eff_h) + "x" +
                     std::to_string(eff_w) + " larger than padded input " +
                     input.str() + " with padding " +
                     std::to_string(g.padding));
  }
  return Shape{input.n, weight.n, (input.h + 2 * g.padding - eff_h) / g.stride + 1,
               (input.w + 2 * g.padding - eff_w) / g.stride + 1};
}

namespace {

struct ConvDims {
  Shape is, ws, os;
  int cin_g, cout_g;
  std::size_t taps;  // rows of the column matrix per group: cin_g * kh * kw
  std::size_t P;     // output plane size
  bool pointwise;    // 1x1, stride 1, no padding: the input planes are the columns
};

ConvDims conv_dims(const Shape& is, const Shape& ws, const Shape& os, const ConvGeometry& g) {
  ConvDims d{is, ws, os, ws.c, ws.n / g.groups,
             static_cast<std::size_t>(ws.c) * ws.h * ws.w, os.plane(), false};
  d.pointwise = ws.h == 1 && ws.w == 1 && g.stride == 1 && g.padding == 0;
  return d;
}

// Column matrix of one group of image n: row (cil, kh, kw), column (oh, ow).
// Padded taps are zero.
void im2col_row(const Tensor& input, const ConvDims& d, const ConvGeometry& g, int n,
                int grp, std::size_t row, double* dst) {
  const int kw = static_cast<int>(row % d.ws.w);
  const int kh = static_cast<int>(row / d.ws.w % d.ws.h);
  const int cil = static_cast<int>(row / (static_cast<std::size_t>(d.ws.w) * d.ws.h));
  const double* ip = input.plane(n, grp * d.cin_g + cil);
  const int oy = kh * g.dilation - g.padding;
  const int ox = kw * g.dilation - g.padding;
  const Range rh = valid_range(oy, g.stride, d.is.h, d.os.h);
  const Range rw = valid_range(ox, g.stride, d.is.w, d.os.w);
  std::fill(dst, dst + d.P, 0.0);
  for (int oh = rh.lo; oh < rh.hi; ++oh) {
    double* drow = dst + static_cast<std::size_t>(oh) * d.os.w;
    const double* irow = ip + static_cast<std::size_t>(oh * g.stride + oy) * d.is.w + ox;
    if (g.stride == 1) {
      for (int ow = rw.lo; ow < rw.hi; ++ow) drow[ow] = irow[ow];
    } else {
      for (int ow = rw.lo; ow < rw.hi; ++ow) drow[ow] = irow[ow * g.stride];
    }
  }
}

void im2col(const Tensor& input, const ConvDims& d, const ConvGeometry& g, int n, int grp,
            double* dst) {
  for (std::size_t r = 0; r < d.taps; ++r) im2col_row(input, d, g, n, grp, r, dst + r * d.P);
}

constexpr int kChannelBlock = 4;

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight,
              std::span<const double> bias, const ConvGeometry& g) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  const Shape os = conv2d_output_shape(is, ws, g);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) +
                     " does not match " + std::to_string(ws.n) +
                     " output channels");
  }
  Tensor out(os);
  const ConvDims d = conv_dims(is, ws, os, g);
  const int blocks = (d.cout_g + kChannelBlock - 1) / kChannelBlock;
  const long items = static_cast<long>(os.n) * g.groups * blocks;

#pragma omp parallel
  {
    std::vector<double> col(d.pointwise ? 0 : d.taps * d.P);
    long cached = -1;
#pragma omp for schedule(static)
    for (long item = 0; item < items; ++item) {
      const long ng = item / blocks;
      const int n = static_cast<int>(ng / g.groups);
      const int grp = static_cast<int>(ng % g.groups);
      const double* cp;
      if (d.pointwise) {
        cp = input.plane(n, grp * d.cin_g);
      } else {
        if (cached != ng) {
          im2col(input, d, g, n, grp, col.data());
          cached = ng;
        }
        cp = col.data();
      }
      const int co0 = grp * d.cout_g + static_cast<int>(item % blocks) * kChannelBlock;
      const int count = std::min(kChannelBlock, (grp + 1) * d.cout_g - co0);
      // Each output element accumulates its taps in (ci, kh, kw) order,
      // then the bias.
      if (count == kChannelBlock) {
        double* o0 = out.plane(n, co0);
        double* o1 = out.plane(n, co0 + 1);
        double* o2 = out.plane(n, co0 + 2);
        double* o3 = out.plane(n, co0 + 3);
        const double* w0 = weight.plane(co0, 0);
        const double* w1 = weight.plane(co0 + 1, 0);
        const double* w2 = weight.plane(co0 + 2, 0);
        const double* w3 = weight.plane(co0 + 3, 0);
        for (std::size_t k = 0; k < d.taps; ++k) {
          const double* c = cp + k * d.P;
          const double a0 = w0[k], a1 = w1[k], a2 = w2[k], a3 = w3[k];
          for (std::size_t p = 0; p < d.P; ++p) {
            const double v = c[p];
            o0[p] += a0 * v;
            o1[p] += a1 * v;
            o2[p] += a2 * v;
            o3[p] += a3 * v;
          }
        }
      } else {
        for (int j = 0; j < count; ++j) {
          double* op = out.plane(n, co0 + j);
          const double* wp = weight.plane(co0 + j, 0);
          for (std::size_t k = 0; k < d.taps; ++k) {
            const double* c = cp + k * d.P;
            const double a = wp[k];
            for (std::size_t p = 0; p < d.P; ++p) op[p] += a * c[p];
          }
        }
      }
      if (!bias.empty()) {
        for (int j = 0; j < count; ++j) {
          double* op = out.plane(n, co0 + j);
          const double b = bias[co0 + j];
          for (std::size_t p = 0; p < d.P; ++p) op[p] += b;
        }
      }
    }
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& is, const ConvGeometry& g) {
  const Shape ws = weight.shape();
  const Shape os = grad_out.shape();
  if (!(conv2d_output_shape(is, ws, g) == os)) {
    throw ShapeError("conv2d backward: gradient dims " + os.str() +
                     " inconsistent with input " + is.str());
  }
  Tensor gin(is);
  const ConvDims d = conv_dims(is, ws, os, g);
  const std::size_t rows = static_cast<std::size_t>(g.groups) * d.taps;
  std::vector<double> dcol(d.pointwise ? 0 : rows * d.P);

  for (int n = 0; n < is.n; ++n) {
    // Column gradient: row r of group grp sums w[co][r] * grad_out[co] over
    // the group's output channels in ascending order.
#pragma omp parallel for schedule(static)
    for (long r = 0; r < static_cast<long>(rows); ++r) {
      const int grp = static_cast<int>(r / static_cast<long>(d.taps));
      const std::size_t k = static_cast<std::size_t>(r) % d.taps;
      double* dst = d.pointwise ? gin.plane(n, static_cast<int>(r))
                                : dcol.data() + static_cast<std::size_t>(r) * d.P;
      if (!d.pointwise) std::fill(dst, dst + d.P, 0.0);
      for (int j = 0; j < d.cout_g; ++j) {
        const int co = grp * d.cout_g + j;
        const double a = weight.plane(co, 0)[k];
        const double* go = grad_out.plane(n, co);
        for (std::size_t p = 0; p < d.P; ++p) dst[p] += a * go[p];
      }
    }
    if (d.pointwise) continue;

    // Scatter the columns back onto the input planes, taps in (kh, kw) order.
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < is.c; ++ci) {
      const int grp = ci / d.cin_g;
      const int cil = ci % d.cin_g;
      double* gp = gin.plane(n, ci);
      for (int kh = 0; kh < ws.h; ++kh) {
        const int oy = kh * g.dilation - g.padding;
        const Range rh = valid_range(oy, g.stride, is.h, os.h);
        for (int kw = 0; kw < ws.w; ++kw) {
          const int ox = kw * g.dilation - g.padding;
          const Range rw = valid_range(ox, g.stride, is.w, os.w);
          const std::size_t row =
              static_cast<std::size_t>(grp) * d.taps +
              (static_cast<std::size_t>(cil) * ws.h + kh) * ws.w + kw;
          const double* src = dcol.data() + row * d.P;
          for (int oh = rh.lo; oh < rh.hi; ++oh) {
            const double* srow = src + static_cast<std::size_t>(oh) * os.w;
            double* irow = gp + static_cast<std::size_t>(oh * g.stride + oy) * is.w + ox;
            if (g.stride == 1) {
              for (int ow = rw.lo; ow < rw.hi; ++ow) irow[ow] += srow[ow];
            } else {
              for (int ow = rw.lo; ow < rw.hi; ++ow) irow[ow * g.stride] += srow[ow];
            }
          }
        }
      }
    }
  }
  return gin;
}

Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& input,
                              const Shape& ws, const ConvGeometry& g) {
  const Shape is = input.shape();
  const Shape os = grad_out.shape();
  if (!(conv2d_output_shape(is, ws, g) == os)) {
    throw ShapeError("conv2d backward: gradient dims " + os.str() +
                     " inconsistent with input " + is.str());
  }
  Tensor gw(ws);
  const ConvDims d = conv_dims(is, ws, os, g);
  const std::size_t rows = static_cast<std::size_t>(g.groups) * d.taps;
  std::vector<double> col(d.pointwise ? 0 : rows * d.P);

  for (int n = 0; n < is.n; ++n) {
    if (!d.pointwise) {
#pragma omp parallel for schedule(static)
      for (long r = 0; r < static_cast<long>(rows); ++r) {
        const int grp = static_cast<int>(r / static_cast<long>(d.taps));
        im2col_row(input, d, g, n, grp, static_cast<std::size_t>(r) % d.taps,
                   col.data() + static_cast<std::size_t>(r) * d.P);
      }
    }
    // Per weight element: images in order, each a four-way split dot product.
#pragma omp parallel for schedule(static)
    for (int co = 0; co < ws.n; ++co) {
      const int grp = co / d.cout_g;
      const double* go = grad_out.plane(n, co);
      const double* cp = d.pointwise ? input.plane(n, grp * d.cin_g)
                                     : col.data() + static_cast<std::size_t>(grp) * d.taps * d.P;
      double* gwp = gw.plane(co, 0);
      for (std::size_t k = 0; k < d.taps; ++k) {
        const double* c = cp + k * d.P;
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        std::size_t p = 0;
        for (; p + 3 < d.P; p += 4) {
          acc[0] += go[p] * c[p];
          acc[1] += go[p + 1] * c[p + 1];
          acc[2] += go[p + 2] * c[p + 2];
          acc[3] += go[p + 3] * c[p + 3];
        }
        for (; p < d.P; ++p) acc[0] += go[p] * c[p];
        gwp[k] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
      }
    }
  }
  return gw;
}

std::vector<double> conv2d_backward_bias(const Tensor& grad_out) {
  const Shape os = grad_out.shape();
  std::vector<double> gb(os.c, 0.0);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < os.c; ++c) {
    double acc = 0.0;
    for (int n = 0; n < os.n; ++n) {
      const double* p = grad_out.plane(n, c);
      for (std::size_t i = 0; i < os.plane(); ++i) acc += p[i];
    }
    gb[c] = acc;
  }
  return gb;
}

Shape maxpool2d_output_shape(const Shape& input, int kernel, int stride,
                             int padding) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ConfigError("maxpool2d: kernel and stride must be positive, padding "
                      "non-negative");
  }
  if (padding >= kernel) {
    throw ConfigError("maxpool2d: padding " + std::to_string(padding) +
                      " must be smaller than kernel " + std::to_string(kernel));
  }
  if (input.h + 2 * padding < kernel || input.w + 2 * padding < kernel) {
    throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) +
                     " larger than padded input " + input.str());
  }
  return Shape{input.n, input.c, (input.h + 2 * padding - kernel) / stride + 1,
               (input.w + 2 * padding - kernel) / stride + 1};
}

MaxPoolResult maxpool2d(const Tensor& input, int kernel, int stride,
                        int padding) {
  const Shape is = input.shape();
  const Shape os = maxpool2d_output_shape(is, kernel, stride, padding);
  MaxPoolResult r{Tensor(os), std::vector<std::int32_t>(os.numel(), -1)};
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      const double* ip = input.plane(n, c);
      double* op = r.output.plane(n, c);
      std::int32_t* ap = r.argmax.data() + r.output.index(n, c, 0, 0);
      for (int oh = 0; oh < os.h; ++oh) {
        for (int ow = 0; ow < os.w; ++ow) {
          double best = kNegInf;
          std::int32_t arg = -1;
          for (int kh = 0; kh < kernel; ++kh) {
            const int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= is.h) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              const int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= is.w) continue;
              const double v = ip[ih * is.w + iw];
              if (arg < 0 || v > best) {
                best = v;
                arg = ih * is.w + iw;
              }
            }
          }
          op[oh * os.w + ow] = best;
          ap[oh * os.w + ow] = arg;
        }
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Tensor& grad_out,
                          std::span<const std::int32_t> argmax,
                          const Shape& is) {
  const Shape os = grad_out.shape();
  Tensor gin(is);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      const std::size_t base = grad_out.index(n, c, 0, 0);
      const double* gp = grad_out.plane(n, c);
      double* ip = gin.plane(n, c);
      for (std::size_t i = 0; i < os.plane(); ++i) {
        const std::int32_t a = argmax[base + i];
        if (a >= 0) ip[a] += gp[i];
      }
    }
  }
  return gin;
}

void channel_moments(const Tensor& input, std::vector<double>& mean,
                     std::vector<double>& var) {
  const Shape s = input.shape();
  mean.assign(s.c, 0.0);
  var.assign(s.c, 0.0);
  const double count = static_cast<double>(s.n) * s.h * s.w;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    double sum = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const double* p = input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
    }
    const double m = sum / count;
    double sq = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const double* p = input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double d = p[i] - m;
        sq += d * d;
      }
    }
    mean[c] = m;
    var[c] = sq / count;
  }
}

Tensor batchnorm_apply(const Tensor& input, std::span<const double> mean,
                       std::span<const double> inv_std,
                       std::span<const double> gamma,
                       std::span<const double> beta, Tensor* x_hat) {
  const Shape s = input.shape();
  Tensor out(s);
  if (x_hat != nullptr) *x_hat = Tensor(s);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* ip = input.plane(n, c);
      double* op = out.plane(n, c);
      double* hp = x_hat != nullptr ? x_hat->plane(n, c) : nullptr;
      const double m = mean[c], is = inv_std[c], ga = gamma[c], be = beta[c];
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double h = (ip[i] - m) * is;
        if (hp != nullptr) hp[i] = h;
        op[i] = h * ga + be;
      }
    }
  }
  return out;
}

Tensor upsample_nearest_2x(const Tensor& input) {
  const Shape is = input.shape();
  Tensor out(Shape{is.n, is.c, is.h * 2, is.w * 2});
  const int ow = is.w * 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < is.n; ++n) {
    for (int c = 0; c < is.c; ++c) {
      const double* ip = input.plane(n, c);
      double* op = out.plane(n, c);
      for (int y = 0; y < is.h * 2; ++y) {
        for (int x = 0; x < ow; ++x) op[y * ow + x] = ip[(y / 2) * is.w + x / 2];
      }
    }
  }
  return out;
}

Tensor upsample_nearest_2x_backward(const Tensor& grad_out) {
  const Shape os = grad_out.shape();
  Tensor gin(Shape{os.n, os.c, os.h / 2, os.w / 2});
  const int iw = os.w / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      const double* gp = grad_out.plane(n, c);
      double* ip = gin.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        for (int x = 0; x < os.w; ++x) ip[(y / 2) * iw + x / 2] += gp[y * os.w + x];
      }
    }
  }
  return gin;
}

void set_num_threads(int n) {
  if (n >= 1) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace lfyolo::kernels
