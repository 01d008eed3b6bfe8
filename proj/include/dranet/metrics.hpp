// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/tensor.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace dranet {

/// 10 log10(peak^2 / mse) over every scalar; +infinity for identical inputs.
inline double psnr(const Tensor4d& a, const Tensor4d& b, double peak = 255.0) {
  a.require_same(b, "psnr");
  const double mse = (a.array() - b.array()).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimOptions {
  Index window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 255.0;
};

namespace detail {

/// Normalized 1-D Gaussian taps.
inline std::vector<double> gaussian_taps(Index size, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(size));
  const double centre = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    taps[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[static_cast<std::size_t>(i)];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

/// Window side actually used: the configured size, shrunk to the largest odd
/// size that fits when the image is smaller.
inline Index ssim_window(Index h, Index w, Index requested) {
  Index side = std::min({requested, h, w});
  if (side % 2 == 0) --side;
  return std::max<Index>(side, 1);
}

/// Separable "valid" Gaussian filtering of an h x w plane.
inline Eigen::ArrayXXd filter_valid(const Eigen::ArrayXXd& img, const std::vector<double>& taps) {
  const Index k = static_cast<Index>(taps.size());
  const Index oh = img.rows() - k + 1;
  const Index ow = img.cols() - k + 1;
  Eigen::ArrayXXd rows = Eigen::ArrayXXd::Zero(oh, img.cols());
  for (Index i = 0; i < k; ++i) rows += taps[static_cast<std::size_t>(i)] * img.middleRows(i, oh);
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(oh, ow);
  for (Index j = 0; j < k; ++j) out += taps[static_cast<std::size_t>(j)] * rows.middleCols(j, ow);
  return out;
}

}  // namespace detail

/// Mean SSIM over all (n, c) planes. Each plane's SSIM is the mean of the
/// local index over all window placements inside the image.
inline double ssim(const Tensor4d& a, const Tensor4d& b, const SsimOptions& opt = {}) {
  a.require_same(b, "ssim");
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
  const auto taps = detail::gaussian_taps(detail::ssim_window(a.h(), a.w(), opt.window), opt.sigma);
  double total = 0.0;
  for (Index n = 0; n < a.n(); ++n) {
    for (Index c = 0; c < a.c(); ++c) {
      const Eigen::ArrayXXd x = a.plane(n, c).array();
      const Eigen::ArrayXXd y = b.plane(n, c).array();
      const Eigen::ArrayXXd mx = detail::filter_valid(x, taps);
      const Eigen::ArrayXXd my = detail::filter_valid(y, taps);
      const Eigen::ArrayXXd sxx = detail::filter_valid(x * x, taps) - mx * mx;
      const Eigen::ArrayXXd syy = detail::filter_valid(y * y, taps) - my * my;
      const Eigen::ArrayXXd sxy = detail::filter_valid(x * y, taps) - mx * my;
      const Eigen::ArrayXXd map =
          ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      total += map.mean();
    }
  }
  return total / static_cast<double>(a.n() * a.c());
}

}  // namespace dranet
