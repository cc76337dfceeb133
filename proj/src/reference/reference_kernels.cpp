#include "reference_kernels.hpp"

#include <limits>

namespace lfyolo::reference {

Tensor conv2d_direct(const Tensor& input, const Tensor& weight,
                     std::span<const double> bias,
                     const kernels::ConvGeometry& g) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  const Shape os = kernels::conv2d_output_shape(is, ws, g);
  Tensor out(os);
  const int cout_g = ws.n / g.groups;
  for (int n = 0; n < os.n; ++n)
    for (int co = 0; co < os.c; ++co)
      for (int oh = 0; oh < os.h; ++oh)
        for (int ow = 0; ow < os.w; ++ow) {
          const int grp = co / cout_g;
          double acc = 0.0;
          for (int cil = 0; cil < ws.c; ++cil)
            for (int kh = 0; kh < ws.h; ++kh)
              for (int kw = 0; kw < ws.w; ++kw) {
                const int ih = oh * g.stride - g.padding + kh * g.dilation;
                const int iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                acc += weight.at(co, cil, kh, kw) *
                       input.at(n, grp * ws.c + cil, ih, iw);
              }
          if (!bias.empty()) acc += bias[co];
          out.at(n, co, oh, ow) = acc;
        }
  return out;
}

Tensor conv2d_backward_input_direct(const Tensor& grad_out,
                                    const Tensor& weight, const Shape& is,
                                    const kernels::ConvGeometry& g) {
  const Shape ws = weight.shape();
  const Shape os = grad_out.shape();
  const int cout_g = ws.n / g.groups;
  Tensor gin(is);
  for (int n = 0; n < is.n; ++n)
    for (int ci = 0; ci < is.c; ++ci)
      for (int ih = 0; ih < is.h; ++ih)
        for (int iw = 0; iw < is.w; ++iw) {
          const int grp = ci / ws.c;
          const int cil = ci % ws.c;
          double acc = 0.0;
          for (int col = 0; col < cout_g; ++col)
            for (int kh = 0; kh < ws.h; ++kh)
              for (int kw = 0; kw < ws.w; ++kw) {
                const int ty = ih + g.padding - kh * g.dilation;
                const int tx = iw + g.padding - kw * g.dilation;
                if (ty < 0 || tx < 0 || ty % g.stride || tx % g.stride) continue;
                const int oh = ty / g.stride;
                const int ow = tx / g.stride;
                if (oh >= os.h || ow >= os.w) continue;
                const int co = grp * cout_g + col;
                acc += weight.at(co, cil, kh, kw) * grad_out.at(n, co, oh, ow);
              }
          gin.at(n, ci, ih, iw) = acc;
        }
  return gin;
}

Tensor conv2d_backward_weight_direct(const Tensor& grad_out,
                                     const Tensor& input, const Shape& ws,
                                     const kernels::ConvGeometry& g) {
  const Shape is = input.shape();
  const Shape os = grad_out.shape();
  const int cout_g = ws.n / g.groups;
  Tensor gw(ws);
  for (int co = 0; co < ws.n; ++co)
    for (int cil = 0; cil < ws.c; ++cil)
      for (int kh = 0; kh < ws.h; ++kh)
        for (int kw = 0; kw < ws.w; ++kw) {
          const int ci = (co / cout_g) * ws.c + cil;
          double acc = 0.0;
          for (int n = 0; n < os.n; ++n)
            for (int oh = 0; oh < os.h; ++oh)
              for (int ow = 0; ow < os.w; ++ow) {
                const int ih = oh * g.stride - g.padding + kh * g.dilation;
                const int iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                acc += grad_out.at(n, co, oh, ow) * input.at(n, ci, ih, iw);
              }
          gw.at(co, cil, kh, kw) = acc;
        }
  return gw;
}

Tensor maxpool2d_direct(const Tensor& input, int kernel, int stride,
                        int padding) {
  const Shape is = input.shape();
  const Shape os = kernels::maxpool2d_output_shape(is, kernel, stride, padding);
  Tensor out(os);
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c)
      for (int oh = 0; oh < os.h; ++oh)
        for (int ow = 0; ow < os.w; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw) {
              const int ih = oh * stride - padding + kh;
              const int iw = ow * stride - padding + kw;
              if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
              if (input.at(n, c, ih, iw) > best) best = input.at(n, c, ih, iw);
            }
          out.at(n, c, oh, ow) = best;
        }
  return out;
}

}  // namespace lfyolo::reference
