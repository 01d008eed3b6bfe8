// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/autodiff.hpp"

#include <cmath>
#include <string>

namespace dranet {

enum class LossMode { Mse, CharbonnierEdge };

struct LossConfig {
  LossMode mode = LossMode::Mse;
  double epsilon = 1e-3;
  double lambda_edge = 0.1;

  bool operator==(const LossConfig&) const = default;

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("loss epsilon must be > 0");
    if (!(lambda_edge >= 0.0)) throw ConfigError("loss lambda_edge must be >= 0");
  }
};

inline const char* loss_mode_name(LossMode m) { return m == LossMode::Mse ? "mse" : "charbonnier_edge"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "mse") return LossMode::Mse;
  if (s == "charbonnier_edge") return LossMode::CharbonnierEdge;
  throw ConfigError("unknown loss mode '" + s + "'");
}

namespace detail {

template <typename Scalar>
void check_same_shape(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + a.shape().str() + " vs target " + b.shape().str());
  }
}

template <typename Scalar>
Tensor4<Scalar> laplacian_impl(const Tensor4<Scalar>& img, bool adjoint) {
  const Index H = img.h();
  const Index W = img.w();
  Tensor4<Scalar> out(img.shape());
  for (Index n = 0; n < img.n(); ++n) {
    for (Index c = 0; c < img.c(); ++c) {
      const Scalar* src = img.data() + img.offset(n, c, 0, 0);
      Scalar* dst = out.data() + out.offset(n, c, 0, 0);
      for (Index y = 0; y < H; ++y) {
        const Index up = std::max<Index>(y - 1, 0) * W;
        const Index down = std::min<Index>(y + 1, H - 1) * W;
        for (Index x = 0; x < W; ++x) {
          const Index left = std::max<Index>(x - 1, 0);
          const Index right = std::min<Index>(x + 1, W - 1);
          const Index here = y * W + x;
          if (!adjoint) {
            const Scalar v = src[here];
            dst[here] = (src[up + x] - v) + (src[down + x] - v) + (src[y * W + left] - v) + (src[y * W + right] - v);
          } else {
            const Scalar g = src[here];
            dst[up + x] += g;
            dst[down + x] += g;
            dst[y * W + left] += g;
            dst[y * W + right] += g;
            dst[here] -= Scalar(4) * g;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// 4-neighbour Laplacian [[0,1,0],[1,-4,1],[0,1,0]] per channel, replicate padding.
template <typename Scalar>
Tensor4<Scalar> laplacian(const Tensor4<Scalar>& img) {
  if (img.h() < 3 || img.w() < 3) throw ShapeError("laplacian needs h, w >= 3, got " + img.shape().str());
  return detail::laplacian_impl(img, false);
}

template <typename Scalar>
Var<Scalar> laplacian(const Var<Scalar>& img) {
  return detail::record<Scalar>(OpKind::Laplacian, {&img}, laplacian(img.value()), [](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{detail::laplacian_impl(g, true)};
  });
}

/// (1/2) * mean((pred - target)^2)
template <typename Scalar>
Var<Scalar> mse_loss(const Var<Scalar>& pred, const Var<Scalar>& target) {
  detail::check_same_shape(pred.value(), target.value(), "mse_loss");
  auto diff = std::make_shared<const typename Tensor4<Scalar>::Storage>(pred.value().array() - target.value().array());
  const Scalar value = Scalar(0.5) * diff->square().sum() / static_cast<Scalar>(diff->size());
  const Shape shape = pred.shape();
  return detail::record<Scalar>(OpKind::MseLoss, {&pred, &target}, Tensor4<Scalar>::scalar(value),
                                [diff, shape](const Tensor4<Scalar>& g) {
                                  const Scalar k = g[0] / static_cast<Scalar>(diff->size());
                                  Tensor4<Scalar> dp(shape, *diff * k);
                                  Tensor4<Scalar> dt(shape, -dp.array());
                                  return std::vector<Tensor4<Scalar>>{std::move(dp), std::move(dt)};
                                });
}

/// mean(sqrt((pred - target)^2 + eps^2)), evaluated per pixel.
template <typename Scalar>
Var<Scalar> charbonnier(const Var<Scalar>& pred, const Var<Scalar>& target, double epsilon) {
  detail::check_same_shape(pred.value(), target.value(), "charbonnier");
  const Scalar eps = static_cast<Scalar>(epsilon);
  auto diff = std::make_shared<const typename Tensor4<Scalar>::Storage>(pred.value().array() - target.value().array());
  auto root = std::make_shared<const typename Tensor4<Scalar>::Storage>((diff->square() + eps * eps).sqrt());
  const Scalar value = shifted_mean<Scalar>(*root);
  const Shape shape = pred.shape();
  return detail::record<Scalar>(OpKind::Charbonnier, {&pred, &target}, Tensor4<Scalar>::scalar(value),
                                [diff, root, shape](const Tensor4<Scalar>& g) {
                                  const Scalar k = g[0] / static_cast<Scalar>(diff->size());
                                  Tensor4<Scalar> dp(shape, *diff / *root * k);
                                  Tensor4<Scalar> dt(shape, -dp.array());
                                  return std::vector<Tensor4<Scalar>>{std::move(dp), std::move(dt)};
                                });
}

template <typename Scalar>
Var<Scalar> edge_loss(const Var<Scalar>& pred, const Var<Scalar>& target, double epsilon) {
  detail::check_same_shape(pred.value(), target.value(), "edge_loss");
  return charbonnier(laplacian(pred), laplacian(target), epsilon);
}

/// charbonnier + lambda_edge * edge_loss
template <typename Scalar>
Var<Scalar> total_loss(const Var<Scalar>& pred, const Var<Scalar>& target, const LossConfig& cfg) {
  cfg.validate();
  return add(charbonnier(pred, target, cfg.epsilon),
             scale(edge_loss(pred, target, cfg.epsilon), static_cast<Scalar>(cfg.lambda_edge)));
}

/// The objective selected by cfg.mode.
template <typename Scalar>
Var<Scalar> training_loss(const Var<Scalar>& pred, const Var<Scalar>& target, const LossConfig& cfg) {
  return cfg.mode == LossMode::Mse ? mse_loss(pred, target) : total_loss(pred, target, cfg);
}

// Plain-tensor conveniences.

template <typename Scalar>
Scalar mse_loss(const Tensor4<Scalar>& pred, const Tensor4<Scalar>& target) {
  return mse_loss(Var<Scalar>(pred), Var<Scalar>(target)).value()[0];
}
template <typename Scalar>
Scalar charbonnier(const Tensor4<Scalar>& pred, const Tensor4<Scalar>& target, double epsilon) {
  return charbonnier(Var<Scalar>(pred), Var<Scalar>(target), epsilon).value()[0];
}
template <typename Scalar>
Scalar edge_loss(const Tensor4<Scalar>& pred, const Tensor4<Scalar>& target, double epsilon) {
  return edge_loss(Var<Scalar>(pred), Var<Scalar>(target), epsilon).value()[0];
}
template <typename Scalar>
Scalar total_loss(const Tensor4<Scalar>& pred, const Tensor4<Scalar>& target, const LossConfig& cfg) {
  return total_loss(Var<Scalar>(pred), Var<Scalar>(target), cfg).value()[0];
}

}  // namespace dranet
