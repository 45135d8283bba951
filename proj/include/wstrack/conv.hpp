#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "wstrack/tensor.hpp"

namespace wstrack {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int conv_out_dim(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Unpack x[sample] into the patch matrix: row = output pixel,
// col = (ic, ky, kx). Zero padding.
inline void im2col(const Tensor4& x, int sample, int kh, int kw, int stride, int padding,
                   int oh, int ow, MatrixRM& cols) {
  cols.setZero(int64_t(oh) * ow, int64_t(x.c) * kh * kw);
  for (int ic = 0; ic < x.c; ++ic) {
    const double* src = x.channel(sample, ic);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double* row = cols.data() + (int64_t(oy) * ow + ox) * cols.cols() + int64_t(ic) * kh * kw;
        int iy0 = oy * stride - padding;
        int ix0 = ox * stride - padding;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ix0 + kx;
            if (ix < 0 || ix >= x.w) continue;
            row[ky * kw + kx] = src[iy * x.w + ix];
          }
        }
      }
    }
  }
}

// Scatter-add the patch matrix back into an input-shaped gradient.
inline void col2im(const MatrixRM& cols, int sample, int kh, int kw, int stride, int padding,
                   int oh, int ow, Tensor4& dx) {
  for (int ic = 0; ic < dx.c; ++ic) {
    double* dst = dx.channel(sample, ic);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* row =
            cols.data() + (int64_t(oy) * ow + ox) * cols.cols() + int64_t(ic) * kh * kw;
        int iy0 = oy * stride - padding;
        int ix0 = ox * stride - padding;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= dx.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ix0 + kx;
            if (ix < 0 || ix >= dx.w) continue;
            dst[iy * dx.w + ix] += row[ky * kw + kx];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution (cross-correlation) with zero padding.
// kernel dims: (out_c, in_c, kh, kw); bias is per-output-channel or empty.
inline Tensor4 conv2d(const Tensor4& x, const Tensor4& kernel, std::span<const double> bias,
                      int stride = 1, int padding = 0) {
  if (kernel.c != x.c)
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.c) +
                                " input channels, input has " + std::to_string(x.c) + " " +
                                x.shape_str());
  if (!bias.empty() && int(bias.size()) != kernel.n)
    throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.size()) +
                                " != out channels " + std::to_string(kernel.n));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const int oh = conv_out_dim(x.h, kernel.h, stride, padding);
  const int ow = conv_out_dim(x.w, kernel.w, stride, padding);
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("conv2d: empty output for input " + x.shape_str() + " kernel " +
                                kernel.shape_str());

  Tensor4 out(x.n, kernel.n, oh, ow);
  // weights as (in_c*kh*kw) x out_c
  Eigen::Map<const MatrixRM> wmat(kernel.v.data(), kernel.n, int64_t(kernel.c) * kernel.h * kernel.w);
  MatrixRM cols;
  for (int s = 0; s < x.n; ++s) {
    detail::im2col(x, s, kernel.h, kernel.w, stride, padding, oh, ow, cols);
    MatrixRM y = cols * wmat.transpose();  // (oh*ow) x out_c
    for (int oc = 0; oc < kernel.n; ++oc) {
      double b = bias.empty() ? 0.0 : bias[size_t(oc)];
      double* dst = out.channel(s, oc);
      for (int64_t p = 0; p < int64_t(oh) * ow; ++p) dst[p] = y(p, oc) + b;
    }
  }
  return out;
}

struct Conv2dGrads {
  Tensor4 dx;
  Tensor4 dkernel;
  std::vector<double> dbias;
};

inline Conv2dGrads conv2d_backward(const Tensor4& gout, const Tensor4& x, const Tensor4& kernel,
                                   int stride = 1, int padding = 0) {
  const int oh = conv_out_dim(x.h, kernel.h, stride, padding);
  const int ow = conv_out_dim(x.w, kernel.w, stride, padding);
  if (gout.n != x.n || gout.c != kernel.n || gout.h != oh || gout.w != ow)
    throw std::invalid_argument("conv2d_backward: upstream shape " + gout.shape_str() +
                                " does not match forward output (" + std::to_string(x.n) + "," +
                                std::to_string(kernel.n) + "," + std::to_string(oh) + "," +
                                std::to_string(ow) + ")");

  Conv2dGrads g{zeros_like(x), zeros_like(kernel), std::vector<double>(size_t(kernel.n), 0.0)};
  Eigen::Map<const MatrixRM> wmat(kernel.v.data(), kernel.n, int64_t(kernel.c) * kernel.h * kernel.w);
  Eigen::Map<MatrixRM> dwmat(g.dkernel.v.data(), kernel.n, int64_t(kernel.c) * kernel.h * kernel.w);

  MatrixRM cols, gy(int64_t(oh) * ow, kernel.n);
  for (int s = 0; s < x.n; ++s) {
    for (int oc = 0; oc < kernel.n; ++oc) {
      const double* src = gout.channel(s, oc);
      for (int64_t p = 0; p < int64_t(oh) * ow; ++p) gy(p, oc) = src[p];
      double acc = 0.0;
      for (int64_t p = 0; p < int64_t(oh) * ow; ++p) acc += src[p];
      g.dbias[size_t(oc)] += acc;
    }
    detail::im2col(x, s, kernel.h, kernel.w, stride, padding, oh, ow, cols);
    dwmat.noalias() += gy.transpose() * cols;
    MatrixRM dcols = gy * wmat;
    detail::col2im(dcols, s, kernel.h, kernel.w, stride, padding, oh, ow, g.dx);
  }
  return g;
}

// Corner-aligned bilinear resize: output sample i maps to source
// coordinate i*(in-1)/(out-1) (0 when out == 1). Channel count preserved;
// values stay within the source channel's [min, max].
inline Tensor4 bilinear_resize(const Tensor4& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output dims must be >= 1");
  if (out_h == x.h && out_w == x.w) return x;
  Tensor4 out(x.n, x.c, out_h, out_w);
  const double sy = out_h > 1 ? double(x.h - 1) / double(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? double(x.w - 1) / double(out_w - 1) : 0.0;
  for (int s = 0; s < x.n; ++s) {
    for (int ic = 0; ic < x.c; ++ic) {
      const double* src = x.channel(s, ic);
      double* dst = out.channel(s, ic);
      for (int oy = 0; oy < out_h; ++oy) {
        double fy = sy * oy;
        int y0 = int(fy);
        if (y0 > x.h - 2) y0 = x.h > 1 ? x.h - 2 : 0;
        double wy = x.h > 1 ? fy - y0 : 0.0;
        for (int ox = 0; ox < out_w; ++ox) {
          double fx = sx * ox;
          int x0 = int(fx);
          if (x0 > x.w - 2) x0 = x.w > 1 ? x.w - 2 : 0;
          double wx = x.w > 1 ? fx - x0 : 0.0;
          int x1 = x.w > 1 ? x0 + 1 : x0;
          int y1 = x.h > 1 ? y0 + 1 : y0;
          double top = src[y0 * x.w + x0] * (1.0 - wx) + src[y0 * x.w + x1] * wx;
          double bot = src[y1 * x.w + x0] * (1.0 - wx) + src[y1 * x.w + x1] * wx;
          dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
      }
    }
  }
  return out;
}

enum class Act { sigmoid, relu, tanh };

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline Tensor4 activation(const Tensor4& x, Act kind) {
  Tensor4 out = zeros_like(x);
  switch (kind) {
    case Act::sigmoid:
      for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = sigmoid(x.v[i]);
      break;
    case Act::relu:
      for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] > 0.0 ? x.v[i] : 0.0;
      break;
    case Act::tanh:
      for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = std::tanh(x.v[i]);
      break;
  }
  return out;
}

// d(relu)/dx gated by the forward input.
inline Tensor4 relu_backward(const Tensor4& gout, const Tensor4& x) {
  gout.require_same_shape(x, "relu_backward");
  Tensor4 dx = zeros_like(x);
  for (size_t i = 0; i < x.v.size(); ++i) dx.v[i] = x.v[i] > 0.0 ? gout.v[i] : 0.0;
  return dx;
}

}  // namespace wstrack
