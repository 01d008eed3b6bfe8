// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/tensor.hpp"

#include <algorithm>
#include <utility>
#include <vector>

namespace dranet {

/// Geometry of one convolution layer. Weights of a regular convolution are
/// laid out (out_ch, in_ch, kh, kw); weights of a transposed convolution are
/// laid out (in_ch, out_ch, kh, kw), the adjoint of the matching forward conv.
struct ConvSpec {
  Index kh = 3;
  Index kw = 3;
  Index stride = 1;
  Index dilation = 1;
  Index pad = 0;
  Index in_ch = 1;
  Index out_ch = 1;
  bool transposed = false;

  bool operator==(const ConvSpec&) const = default;

  /// k x k, stride 1, padding d*(k-1)/2: preserves spatial size.
  static ConvSpec same(Index in_ch, Index out_ch, Index kernel = 3, Index dilation = 1) {
    return {kernel, kernel, 1, dilation, dilation * (kernel - 1) / 2, in_ch, out_ch, false};
  }
  static ConvSpec downsample(Index channels) { return {2, 2, 2, 1, 0, channels, channels, false}; }
  static ConvSpec upsample(Index channels) { return {2, 2, 2, 1, 0, channels, channels, true}; }

  Shape weight_shape() const {
    return transposed ? Shape{in_ch, out_ch, kh, kw} : Shape{out_ch, in_ch, kh, kw};
  }
  Shape bias_shape() const { return Shape{1, out_ch, 1, 1}; }
  Index parameter_count() const { return out_ch * in_ch * kh * kw + out_ch; }

  void validate() const {
    if (kh < 1 || kw < 1) throw ConfigError("conv kernel must be positive");
    if (stride < 1) throw ConfigError("conv stride must be >= 1");
    if (dilation < 1) throw ConfigError("conv dilation must be >= 1");
    if (pad < 0) throw ConfigError("conv padding must be >= 0");
    if (in_ch < 1 || out_ch < 1) throw ConfigError("conv channel counts must be >= 1");
    if (transposed && dilation != 1) throw ConfigError("transposed conv requires dilation 1");
  }
};

inline std::pair<Index, Index> out_dims(const ConvSpec& spec, Index h, Index w) {
  spec.validate();
  Index oh = 0;
  Index ow = 0;
  if (spec.transposed) {
    oh = (h - 1) * spec.stride - 2 * spec.pad + spec.kh;
    ow = (w - 1) * spec.stride - 2 * spec.pad + spec.kw;
  } else {
    Index num_h = h + 2 * spec.pad - spec.dilation * (spec.kh - 1) - 1;
    Index num_w = w + 2 * spec.pad - spec.dilation * (spec.kw - 1) - 1;
    if (num_h < 0 || num_w < 0) {
      throw ShapeError("conv kernel extent exceeds padded input " + std::to_string(h) + "x" + std::to_string(w));
    }
    oh = num_h / spec.stride + 1;
    ow = num_w / spec.stride + 1;
  }
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv output would be empty for input " + std::to_string(h) + "x" + std::to_string(w));
  }
  return {oh, ow};
}

namespace detail {

/// Sampling geometry between a "large" grid (the conv input) and a "small"
/// grid (the conv output): small(oy, ox) reads large(oy*s + ky*d - p, ...).
struct PatchGeometry {
  Index channels, height, width;
  Index kh, kw, stride, dilation, pad;
  Index out_h, out_w;

  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

/// cols is (channels*kh*kw) x (out_h*out_w), row-major.
template <typename Scalar>
void im2col(const Scalar* image, const PatchGeometry& g, Scalar* cols) {
  const Index positions = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        const Index dy = ky * g.dilation - g.pad;
        const Index dx = kx * g.dilation - g.pad;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.stride + dy;
          Scalar* dst = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + y * g.width;
          if (g.stride == 1) {
            // x = ox + dx; valid ox in [lo, hi)
            const Index lo = std::max<Index>(0, -dx);
            const Index hi = std::min<Index>(g.out_w, g.width - dx);
            Index ox = 0;
            for (; ox < std::min(lo, g.out_w); ++ox) dst[ox] = Scalar(0);
            for (; ox < hi; ++ox) dst[ox] = src[ox + dx];
            for (; ox < g.out_w; ++ox) dst[ox] = Scalar(0);
          } else {
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index x = ox * g.stride + dx;
              dst[ox] = (x >= 0 && x < g.width) ? src[x] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds cols back onto the image grid.
template <typename Scalar>
void col2im(const Scalar* cols, const PatchGeometry& g, Scalar* image) {
  const Index positions = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        const Index dy = ky * g.dilation - g.pad;
        const Index dx = kx * g.dilation - g.pad;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.stride + dy;
          if (y < 0 || y >= g.height) continue;
          const Scalar* src = row + oy * g.out_w;
          Scalar* dst = plane + y * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index x = ox * g.stride + dx;
            if (x >= 0 && x < g.width) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_conv_operands(const Shape& input, const Shape& weight, const Shape& bias, const ConvSpec& spec) {
  spec.validate();
  if (input.c != spec.in_ch) {
    throw ShapeError("conv input channels: got " + std::to_string(input.c) + ", spec expects " +
                     std::to_string(spec.in_ch));
  }
  const Shape ws = spec.weight_shape();
  if (weight != ws) throw ShapeError("conv weight shape: got " + weight.str() + ", expected " + ws.str());
  if (bias.size() != spec.out_ch) {
    throw ShapeError("conv bias length: got " + std::to_string(bias.size()) + ", expected " +
                     std::to_string(spec.out_ch));
  }
}

/// Geometry with the conv input as the large grid (forward conv, or the
/// output side of a transposed conv).
inline PatchGeometry conv_geometry(const ConvSpec& spec, Index channels, Index large_h, Index large_w, Index small_h,
                                   Index small_w) {
  return {channels, large_h, large_w, spec.kh, spec.kw, spec.stride, spec.dilation, spec.pad, small_h, small_w};
}

}  // namespace detail

/// Zero-padded cross-correlation with stride and dilation.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const Tensor4<Scalar>& weight, const Tensor4<Scalar>& bias,
                       const ConvSpec& spec) {
  if (spec.transposed) throw ConfigError("conv2d called with a transposed spec");
  detail::check_conv_operands(input.shape(), weight.shape(), bias.shape(), spec);
  const auto [oh, ow] = out_dims(spec, input.h(), input.w());
  Tensor4<Scalar> out(input.n(), spec.out_ch, oh, ow);
  const auto g = detail::conv_geometry(spec, spec.in_ch, input.h(), input.w(), oh, ow);
  typename detail::RowMatrix<Scalar> cols(g.rows(), g.cols());
  Eigen::Map<const detail::RowMatrix<Scalar>> wmat(weight.data(), spec.out_ch, g.rows());
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.data(), spec.out_ch);
  for (Index n = 0; n < input.n(); ++n) {
    detail::im2col(input.data() + input.offset(n, 0, 0, 0), g, cols.data());
    auto dst = out.item(n);
    dst.noalias() = wmat * cols;
    dst.colwise() += b;
  }
  return out;
}

template <typename Scalar>
struct ConvGrads {
  Tensor4<Scalar> input;
  Tensor4<Scalar> weight;
  Tensor4<Scalar> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& weight,
                                  const Tensor4<Scalar>& grad_out, const ConvSpec& spec) {
  const auto g = detail::conv_geometry(spec, spec.in_ch, input.h(), input.w(), grad_out.h(), grad_out.w());
  ConvGrads<Scalar> grads{Tensor4<Scalar>(input.shape()), Tensor4<Scalar>(weight.shape()),
                          Tensor4<Scalar>(spec.bias_shape())};
  typename detail::RowMatrix<Scalar> cols(g.rows(), g.cols());
  typename detail::RowMatrix<Scalar> dcols(g.rows(), g.cols());
  Eigen::Map<const detail::RowMatrix<Scalar>> wmat(weight.data(), spec.out_ch, g.rows());
  Eigen::Map<detail::RowMatrix<Scalar>> dw(grads.weight.data(), spec.out_ch, g.rows());
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> db(grads.bias.data(), spec.out_ch);
  for (Index n = 0; n < input.n(); ++n) {
    auto dout = grad_out.item(n);
    detail::im2col(input.data() + input.offset(n, 0, 0, 0), g, cols.data());
    dw.noalias() += dout * cols.transpose();
    db += dout.rowwise().sum();
    dcols.noalias() = wmat.transpose() * dout;
    detail::col2im(dcols.data(), g, grads.input.data() + grads.input.offset(n, 0, 0, 0));
  }
  return grads;
}

/// Transposed convolution: each input pixel scatters a weighted kernel
/// footprint onto the (upsampled) output grid.
template <typename Scalar>
Tensor4<Scalar> conv2d_transposed(const Tensor4<Scalar>& input, const Tensor4<Scalar>& weight,
                                  const Tensor4<Scalar>& bias, const ConvSpec& spec) {
  if (!spec.transposed) throw ConfigError("conv2d_transposed called with a regular spec");
  detail::check_conv_operands(input.shape(), weight.shape(), bias.shape(), spec);
  const auto [oh, ow] = out_dims(spec, input.h(), input.w());
  Tensor4<Scalar> out(input.n(), spec.out_ch, oh, ow);
  const auto g = detail::conv_geometry(spec, spec.out_ch, oh, ow, input.h(), input.w());
  typename detail::RowMatrix<Scalar> cols(g.rows(), g.cols());
  Eigen::Map<const detail::RowMatrix<Scalar>> wmat(weight.data(), spec.in_ch, g.rows());
  for (Index n = 0; n < input.n(); ++n) {
    cols.noalias() = wmat.transpose() * input.item(n);
    detail::col2im(cols.data(), g, out.data() + out.offset(n, 0, 0, 0));
    out.item(n).colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data(), spec.out_ch);
  }
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_transposed_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& weight,
                                             const Tensor4<Scalar>& grad_out, const ConvSpec& spec) {
  const auto g = detail::conv_geometry(spec, spec.out_ch, grad_out.h(), grad_out.w(), input.h(), input.w());
  ConvGrads<Scalar> grads{Tensor4<Scalar>(input.shape()), Tensor4<Scalar>(weight.shape()),
                          Tensor4<Scalar>(spec.bias_shape())};
  typename detail::RowMatrix<Scalar> dcols(g.rows(), g.cols());
  Eigen::Map<const detail::RowMatrix<Scalar>> wmat(weight.data(), spec.in_ch, g.rows());
  Eigen::Map<detail::RowMatrix<Scalar>> dw(grads.weight.data(), spec.in_ch, g.rows());
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> db(grads.bias.data(), spec.out_ch);
  for (Index n = 0; n < input.n(); ++n) {
    auto dout = grad_out.item(n);
    db += dout.rowwise().sum();
    detail::im2col(grad_out.data() + grad_out.offset(n, 0, 0, 0), g, dcols.data());
    dw.noalias() += input.item(n) * dcols.transpose();
    grads.input.item(n).noalias() = wmat * dcols;
  }
  return grads;
}

}  // namespace dranet
