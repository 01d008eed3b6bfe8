// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>

namespace dranet {

namespace detail {

/// Receives the branch decisions of piecewise ops (ReLU sign, max argmax).
/// The finite-difference checker installs one to skip coordinates whose
/// perturbation crosses a non-differentiable point.
struct KinkObserver {
  std::uint64_t hash = 1469598103934665603ULL;
  void mix(std::uint64_t v) {
    hash ^= v;
    hash *= 1099511628211ULL;
  }
};

inline KinkObserver*& kink_observer() {
  thread_local KinkObserver* observer = nullptr;
  return observer;
}

inline void check_binary_shapes(const Shape& a, const Shape& b, const char* op) {
  // channels broadcast from 1; the spatial plane must match or be a single point
  const bool ok_c = a.c == b.c || a.c == 1 || b.c == 1;
  const bool ok_hw = (a.h == b.h && a.w == b.w) || a.plane() == 1 || b.plane() == 1;
  const bool ok = a.n == b.n && ok_c && ok_hw;
  if (!ok) throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  return {a.n, std::max(a.c, b.c), std::max(a.h, b.h), std::max(a.w, b.w)};
}

template <typename Scalar, typename Fn>
Tensor4<Scalar> broadcast_binary(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b, Fn fn, const char* op) {
  check_binary_shapes(a.shape(), b.shape(), op);
  if (a.shape() == b.shape()) {
    return Tensor4<Scalar>(a.shape(), a.array().binaryExpr(b.array(), fn));
  }
  const Shape s = broadcast_shape(a.shape(), b.shape());
  Tensor4<Scalar> out(s);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const Index planes = s.h * s.w;
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* pa = a.data() + a.offset(n, sa.c == 1 ? 0 : c, 0, 0);
      const Scalar* pb = b.data() + b.offset(n, sb.c == 1 ? 0 : c, 0, 0);
      Scalar* po = out.data() + out.offset(n, c, 0, 0);
      const bool a_point = sa.h * sa.w == 1 && planes > 1;
      const bool b_point = sb.h * sb.w == 1 && planes > 1;
      for (Index i = 0; i < planes; ++i) po[i] = fn(pa[a_point ? 0 : i], pb[b_point ? 0 : i]);
    }
  }
  return out;
}

}  // namespace detail

/// Sums `grad` over broadcast dimensions so it matches `shape`.
template <typename Scalar>
Tensor4<Scalar> reduce_to(const Tensor4<Scalar>& grad, const Shape& shape) {
  if (grad.shape() == shape) return grad;
  const Shape& g = grad.shape();
  Tensor4<Scalar> out(shape);
  for (Index n = 0; n < g.n; ++n) {
    for (Index c = 0; c < g.c; ++c) {
      const Index oc = shape.c == 1 ? 0 : c;
      if (shape.h * shape.w == 1) {
        out(n, oc, 0, 0) += grad.plane(n, c).sum();
      } else {
        out.plane(n, oc) += grad.plane(n, c);
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor4<Scalar> add(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  return detail::broadcast_binary(a, b, [](Scalar x, Scalar y) { return x + y; }, "add");
}

template <typename Scalar>
Tensor4<Scalar> sub(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  return detail::broadcast_binary(a, b, [](Scalar x, Scalar y) { return x - y; }, "sub");
}

template <typename Scalar>
Tensor4<Scalar> mul(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  return detail::broadcast_binary(a, b, [](Scalar x, Scalar y) { return x * y; }, "mul");
}

template <typename Scalar>
Tensor4<Scalar> scale(const Tensor4<Scalar>& a, Scalar factor) {
  return Tensor4<Scalar>(a.shape(), a.array() * factor);
}

template <typename Scalar>
Tensor4<Scalar> relu(const Tensor4<Scalar>& a) {
  if (auto* obs = detail::kink_observer()) {
    for (Index i = 0; i < a.size(); ++i) obs->mix(a[i] > Scalar(0) ? 2 * i + 1 : 2 * i);
  }
  return Tensor4<Scalar>(a.shape(), a.array().max(Scalar(0)));
}

/// Derivative 0 at exactly 0.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out) {
  return Tensor4<Scalar>(input.shape(), (input.array() > Scalar(0)).select(grad_out.array(), Scalar(0)));
}

template <typename Scalar>
Tensor4<Scalar> sigmoid(const Tensor4<Scalar>& a) {
  return Tensor4<Scalar>(a.shape(), a.array().unaryExpr([](Scalar x) {
    if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
  }));
}

template <typename Scalar>
Tensor4<Scalar> sigmoid_backward(const Tensor4<Scalar>& output, const Tensor4<Scalar>& grad_out) {
  return Tensor4<Scalar>(output.shape(), grad_out.array() * output.array() * (Scalar(1) - output.array()));
}

/// Channel concatenation, a's channels first.
template <typename Scalar>
Tensor4<Scalar> concat_channels(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: n/h/w must match, got " + a.shape().str() + " and " + b.shape().str());
  }
  Tensor4<Scalar> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (Index n = 0; n < a.n(); ++n) {
    out.item(n).topRows(a.c()) = a.item(n);
    out.item(n).bottomRows(b.c()) = b.item(n);
  }
  return out;
}

/// Splits a gradient of concat_channels back into its operands' slices.
template <typename Scalar>
std::pair<Tensor4<Scalar>, Tensor4<Scalar>> split_channels(const Tensor4<Scalar>& g, Index first_channels) {
  Tensor4<Scalar> a(g.n(), first_channels, g.h(), g.w());
  Tensor4<Scalar> b(g.n(), g.c() - first_channels, g.h(), g.w());
  for (Index n = 0; n < g.n(); ++n) {
    a.item(n) = g.item(n).topRows(first_channels);
    b.item(n) = g.item(n).bottomRows(b.c());
  }
  return {std::move(a), std::move(b)};
}

template <typename Scalar>
Tensor4<Scalar> global_avg_pool(const Tensor4<Scalar>& a) {
  Tensor4<Scalar> out(a.n(), a.c(), 1, 1);
  for (Index n = 0; n < a.n(); ++n) out.item(n).col(0) = a.item(n).rowwise().mean();
  return out;
}

template <typename Scalar>
Tensor4<Scalar> global_avg_pool_backward(const Shape& input, const Tensor4<Scalar>& grad_out) {
  Tensor4<Scalar> g(input);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(input.plane());
  for (Index n = 0; n < input.n; ++n) {
    for (Index c = 0; c < input.c; ++c) g.plane(n, c).setConstant(grad_out(n, c, 0, 0) * inv);
  }
  return g;
}

namespace detail {

/// Row-major index of the first maximum in [first, first+count) with a stride.
template <typename Scalar>
Index first_argmax(const Scalar* first, Index count, Index stride) {
  Index best = 0;
  for (Index i = 1; i < count; ++i) {
    if (first[i * stride] > first[best * stride]) best = i;
  }
  if (auto* obs = kink_observer()) obs->mix(static_cast<std::uint64_t>(best) + 0x9e3779b97f4a7c15ULL);
  return best;
}

}  // namespace detail

template <typename Scalar>
Tensor4<Scalar> global_max_pool(const Tensor4<Scalar>& a) {
  Tensor4<Scalar> out(a.n(), a.c(), 1, 1);
  for (Index n = 0; n < a.n(); ++n) {
    for (Index c = 0; c < a.c(); ++c) {
      const Scalar* p = a.data() + a.offset(n, c, 0, 0);
      out(n, c, 0, 0) = p[detail::first_argmax(p, a.h() * a.w(), 1)];
    }
  }
  return out;
}

/// Routes each gradient to the first maximal position (row-major) of its plane.
template <typename Scalar>
Tensor4<Scalar> global_max_pool_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out) {
  Tensor4<Scalar> g(input.shape());
  for (Index n = 0; n < input.n(); ++n) {
    for (Index c = 0; c < input.c(); ++c) {
      const Index base = input.offset(n, c, 0, 0);
      g[base + detail::first_argmax(input.data() + base, input.h() * input.w(), 1)] = grad_out(n, c, 0, 0);
    }
  }
  return g;
}

/// Per-position statistics across channels: channel 0 = mean, channel 1 = max.
template <typename Scalar>
Tensor4<Scalar> channel_pool(const Tensor4<Scalar>& a) {
  Tensor4<Scalar> out(a.n(), 2, a.h(), a.w());
  const Index plane = a.h() * a.w();
  for (Index n = 0; n < a.n(); ++n) {
    out.item(n).row(0) = a.item(n).colwise().mean();
    const Scalar* base = a.data() + a.offset(n, 0, 0, 0);
    Scalar* mx = out.data() + out.offset(n, 1, 0, 0);
    for (Index i = 0; i < plane; ++i) mx[i] = base[i + detail::first_argmax(base + i, a.c(), plane) * plane];
  }
  return out;
}

template <typename Scalar>
Tensor4<Scalar> channel_pool_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out) {
  Tensor4<Scalar> g(input.shape());
  const Index plane = input.h() * input.w();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(input.c());
  for (Index n = 0; n < input.n(); ++n) {
    g.item(n).rowwise() = grad_out.item(n).row(0) * inv;
    const Scalar* base = input.data() + input.offset(n, 0, 0, 0);
    const Scalar* gmax = grad_out.data() + grad_out.offset(n, 1, 0, 0);
    Scalar* gb = g.data() + g.offset(n, 0, 0, 0);
    for (Index i = 0; i < plane; ++i) gb[i + detail::first_argmax(base + i, input.c(), plane) * plane] += gmax[i];
  }
  return g;
}

template <typename Scalar>
Tensor4<Scalar> sum_all(const Tensor4<Scalar>& a) {
  return Tensor4<Scalar>::scalar(a.array().sum());
}

/// Mean computed as first + mean(x - first): exact for constant tensors.
template <typename Scalar>
Scalar shifted_mean(const typename Tensor4<Scalar>::Storage& x) {
  const Scalar anchor = x[0];
  return anchor + (x - anchor).sum() / static_cast<Scalar>(x.size());
}

template <typename Scalar>
Tensor4<Scalar> mean_all(const Tensor4<Scalar>& a) {
  return Tensor4<Scalar>::scalar(shifted_mean<Scalar>(a.array()));
}

}  // namespace dranet
