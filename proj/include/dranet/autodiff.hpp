// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/conv.hpp"
#include "dranet/named_tensors.hpp"
#include "dranet/ops.hpp"
#include "dranet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dranet {

enum class OpKind : int {
  Leaf,
  Conv2d,
  ConvTranspose2d,
  Add,
  Sub,
  Mul,
  Scale,
  Relu,
  Sigmoid,
  Concat,
  GlobalAvgPool,
  GlobalMaxPool,
  ChannelPool,
  Sum,
  Mean,
  Laplacian,
  MseLoss,
  Charbonnier,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ConvTranspose2d: return "conv2d_transposed";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Concat: return "concat_channels";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::GlobalMaxPool: return "global_max_pool";
    case OpKind::ChannelPool: return "channel_pool";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Laplacian: return "laplacian";
    case OpKind::MseLoss: return "mse_loss";
    case OpKind::Charbonnier: return "charbonnier";
  }
  return "?";
}

/// Test hook: when set, the backward rule of that op returns gradients
/// scaled by 1.5. Used to prove the gradient checker detects broken rules.
inline std::atomic<int>& corrupted_backward_op() {
  static std::atomic<int> op{-1};
  return op;
}

template <typename Scalar>
using GradientMap = NamedTensors<Scalar>;

template <typename Scalar>
using BackwardFn = std::function<std::vector<Tensor4<Scalar>>(const Tensor4<Scalar>&)>;

template <typename Scalar>
struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<int> inputs;  // -1 marks an untracked operand
  Shape shape;
  std::string name;  // leaves only
  BackwardFn<Scalar> backward;
};

template <typename Scalar>
class Tape;

/// A value flowing through the computation; tracked when it lives on a tape.
template <typename Scalar>
class Var {
 public:
  Var() : value_(std::make_shared<const Tensor4<Scalar>>()) {}
  explicit Var(Tensor4<Scalar> value) : value_(std::make_shared<const Tensor4<Scalar>>(std::move(value))) {}

  const Tensor4<Scalar>& value() const { return *value_; }
  const std::shared_ptr<const Tensor4<Scalar>>& shared() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  bool tracked() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  int index() const { return index_; }

 private:
  friend class Tape<Scalar>;
  Var(std::shared_ptr<const Tensor4<Scalar>> value, Tape<Scalar>* tape, int index)
      : value_(std::move(value)), tape_(tape), index_(index) {}

  std::shared_ptr<const Tensor4<Scalar>> value_;
  Tape<Scalar>* tape_ = nullptr;
  int index_ = -1;
};

/// Records a forward computation and sweeps it in reverse.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. Fan-out gradients are summed in reverse recording order.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a named differentiable input (a parameter or probed tensor).
  Var<Scalar> leaf(std::string name, Tensor4<Scalar> value) {
    guard_recording();
    TapeNode<Scalar> node;
    node.op = OpKind::Leaf;
    node.shape = value.shape();
    node.name = std::move(name);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(std::make_shared<const Tensor4<Scalar>>(std::move(value)), this,
                       static_cast<int>(nodes_.size() - 1));
  }

  Var<Scalar> record(OpKind op, std::vector<int> inputs, Tensor4<Scalar> value, BackwardFn<Scalar> backward) {
    guard_recording();
    TapeNode<Scalar> node;
    node.op = op;
    node.inputs = std::move(inputs);
    node.shape = value.shape();
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(std::make_shared<const Tensor4<Scalar>>(std::move(value)), this,
                       static_cast<int>(nodes_.size() - 1));
  }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode<Scalar>& node(std::size_t i) const { return nodes_.at(i); }
  bool swept() const { return swept_; }

  /// Reverse sweep from a scalar seed. Every leaf gets an entry; leaves the
  /// sweep never reaches get exact zeros.
  GradientMap<Scalar> backward(const Var<Scalar>& seed) {
    if (seed.shape().size() != 1) {
      throw ShapeError("backward seed must be a scalar, got shape " + seed.shape().str());
    }
    if (seed.tracked() && seed.tape() != this) throw ConfigError("backward seed belongs to a different tape");
    swept_ = true;
    std::vector<std::optional<Tensor4<Scalar>>> grads(nodes_.size());
    if (seed.tracked()) grads[seed.index()] = Tensor4<Scalar>::constant(seed.shape(), Scalar(1));
    const int corrupted = corrupted_backward_op().load();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      TapeNode<Scalar>& node = nodes_[i];
      if (!grads[i] || node.op == OpKind::Leaf) continue;
      std::vector<Tensor4<Scalar>> partials = node.backward(*grads[i]);
      grads[i].reset();
      if (static_cast<int>(node.op) == corrupted) {
        for (auto& p : partials) p.array() *= Scalar(1.5);
      }
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const int j = node.inputs[k];
        if (j < 0) continue;
        if (partials[k].shape() != nodes_[j].shape) {
          throw ShapeError(std::string("backward of ") + op_name(node.op) + " produced gradient " +
                           partials[k].shape().str() + " for operand " + nodes_[j].shape.str());
        }
        if (grads[j]) {
          *grads[j] += partials[k];
        } else {
          grads[j] = std::move(partials[k]);
        }
      }
    }
    GradientMap<Scalar> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op != OpKind::Leaf) continue;
      out.insert(nodes_[i].name, grads[i] ? std::move(*grads[i]) : Tensor4<Scalar>(nodes_[i].shape));
    }
    return out;
  }

 private:
  void guard_recording() const {
    if (swept_) throw ConfigError("cannot record onto a tape after its backward sweep");
  }

  std::vector<TapeNode<Scalar>> nodes_;
  bool swept_ = false;
};

namespace detail {

/// Wraps an op result: untracked if no operand is tracked, otherwise a new
/// tape node wired to the tracked operands.
template <typename Scalar>
Var<Scalar> record(OpKind op, std::initializer_list<const Var<Scalar>*> operands, Tensor4<Scalar> value,
                   BackwardFn<Scalar> backward) {
  Tape<Scalar>* tape = nullptr;
  std::vector<int> inputs;
  inputs.reserve(operands.size());
  for (const Var<Scalar>* v : operands) {
    if (v->tracked()) {
      if (tape && tape != v->tape()) throw ConfigError(std::string(op_name(op)) + ": operands on different tapes");
      tape = v->tape();
    }
    inputs.push_back(v->index());
  }
  if (!tape) return Var<Scalar>(std::move(value));
  return tape->record(op, std::move(inputs), std::move(value), std::move(backward));
}

}  // namespace detail

// Differentiable wrappers over the tensor primitives.

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, const ConvSpec& spec) {
  auto y = conv2d(x.value(), weight.value(), bias.value(), spec);
  return detail::record<Scalar>(OpKind::Conv2d, {&x, &weight, &bias}, std::move(y),
                                [xv = x.shared(), wv = weight.shared(), bshape = bias.shape(), spec](const Tensor4<Scalar>& g) {
                                  auto r = conv2d_backward(*xv, *wv, g, spec);
                                  return std::vector<Tensor4<Scalar>>{std::move(r.input), std::move(r.weight),
                                                                      r.bias.reshaped(bshape)};
                                });
}

template <typename Scalar>
Var<Scalar> conv2d_transposed(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                              const ConvSpec& spec) {
  auto y = conv2d_transposed(x.value(), weight.value(), bias.value(), spec);
  return detail::record<Scalar>(OpKind::ConvTranspose2d, {&x, &weight, &bias}, std::move(y),
                                [xv = x.shared(), wv = weight.shared(), bshape = bias.shape(), spec](const Tensor4<Scalar>& g) {
                                  auto r = conv2d_transposed_backward(*xv, *wv, g, spec);
                                  return std::vector<Tensor4<Scalar>>{std::move(r.input), std::move(r.weight),
                                                                      r.bias.reshaped(bshape)};
                                });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::record<Scalar>(OpKind::Add, {&a, &b}, add(a.value(), b.value()),
                                [sa = a.shape(), sb = b.shape()](const Tensor4<Scalar>& g) {
                                  return std::vector<Tensor4<Scalar>>{reduce_to(g, sa), reduce_to(g, sb)};
                                });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::record<Scalar>(OpKind::Sub, {&a, &b}, sub(a.value(), b.value()),
                                [sa = a.shape(), sb = b.shape()](const Tensor4<Scalar>& g) {
                                  auto gb = reduce_to(g, sb);
                                  gb.array() = -gb.array();
                                  return std::vector<Tensor4<Scalar>>{reduce_to(g, sa), std::move(gb)};
                                });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::record<Scalar>(OpKind::Mul, {&a, &b}, mul(a.value(), b.value()),
                                [av = a.shared(), bv = b.shared()](const Tensor4<Scalar>& g) {
                                  return std::vector<Tensor4<Scalar>>{reduce_to(mul(g, *bv), av->shape()),
                                                                      reduce_to(mul(g, *av), bv->shape())};
                                });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  return detail::record<Scalar>(OpKind::Scale, {&a}, scale(a.value(), factor), [factor](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{scale(g, factor)};
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::Relu, {&a}, relu(a.value()), [av = a.shared()](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{relu_backward(*av, g)};
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  auto y = std::make_shared<const Tensor4<Scalar>>(sigmoid(a.value()));
  return detail::record<Scalar>(OpKind::Sigmoid, {&a}, *y, [y](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{sigmoid_backward(*y, g)};
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  return detail::record<Scalar>(OpKind::Concat, {&a, &b}, concat_channels(a.value(), b.value()),
                                [ca = a.shape().c](const Tensor4<Scalar>& g) {
                                  auto [ga, gb] = split_channels(g, ca);
                                  return std::vector<Tensor4<Scalar>>{std::move(ga), std::move(gb)};
                                });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::GlobalAvgPool, {&a}, global_avg_pool(a.value()),
                                [sa = a.shape()](const Tensor4<Scalar>& g) {
                                  return std::vector<Tensor4<Scalar>>{global_avg_pool_backward(sa, g)};
                                });
}

template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::GlobalMaxPool, {&a}, global_max_pool(a.value()),
                                [av = a.shared()](const Tensor4<Scalar>& g) {
                                  return std::vector<Tensor4<Scalar>>{global_max_pool_backward(*av, g)};
                                });
}

template <typename Scalar>
Var<Scalar> channel_pool(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::ChannelPool, {&a}, channel_pool(a.value()),
                                [av = a.shared()](const Tensor4<Scalar>& g) {
                                  return std::vector<Tensor4<Scalar>>{channel_pool_backward(*av, g)};
                                });
}

template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::Sum, {&a}, sum_all(a.value()), [sa = a.shape()](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{Tensor4<Scalar>::constant(sa, g[0])};
  });
}

template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& a) {
  return detail::record<Scalar>(OpKind::Mean, {&a}, mean_all(a.value()), [sa = a.shape()](const Tensor4<Scalar>& g) {
    return std::vector<Tensor4<Scalar>>{Tensor4<Scalar>::constant(sa, g[0] / static_cast<Scalar>(sa.size()))};
  });
}

// Finite-difference verification (f64 only).

struct FiniteDiffOptions {
  /// Step is step * max(1, |theta_i|).
  double step = 1e-4;
  Index samples_per_tensor = 64;
  std::uint64_t seed = 0x5eed;
  /// Denominator floor of the relative error.
  double floor = 1e-6;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  Index checked = 0;
  /// Coordinates whose perturbation crossed a ReLU/max switch point.
  Index skipped = 0;
  std::string worst;
};

using ScalarFn = std::function<Var<double>(std::span<const Var<double>>)>;

/// Compares backward() against central differences on a random subsample of
/// each input's coordinates. Coordinates where a probe flips any ReLU sign or
/// max argmax relative to the base point are excluded.
inline FiniteDiffReport finite_diff_check(const ScalarFn& fn, const NamedTensors<double>& inputs,
                                          const FiniteDiffOptions& options = {}) {
  FiniteDiffReport report;
  GradientMap<double> analytic;
  std::uint64_t base_signature = 0;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& [name, t] : inputs) leaves.push_back(tape.leaf(name, t));
    detail::KinkObserver obs;
    detail::kink_observer() = &obs;
    Var<double> out;
    try {
      out = fn(leaves);
    } catch (...) {
      detail::kink_observer() = nullptr;
      throw;
    }
    detail::kink_observer() = nullptr;
    base_signature = obs.hash;
    analytic = tape.backward(out);
  }

  std::vector<Var<double>> probe;
  for (const auto& [_, t] : inputs) probe.emplace_back(t);
  auto evaluate = [&](std::size_t which, Index coord, double value, std::uint64_t& signature) {
    Tensor4d perturbed = inputs[which].second;
    perturbed[coord] = value;
    probe[which] = Var<double>(std::move(perturbed));
    detail::KinkObserver obs;
    detail::kink_observer() = &obs;
    double f = 0.0;
    try {
      f = fn(probe).value().item_value();
    } catch (...) {
      detail::kink_observer() = nullptr;
      throw;
    }
    detail::kink_observer() = nullptr;
    signature = obs.hash;
    return f;
  };

  std::mt19937_64 rng(options.seed);
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const auto& [name, base] = inputs[which];
    std::vector<Index> order(static_cast<std::size_t>(base.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    Index taken = 0;
    for (Index coord : order) {
      if (taken >= options.samples_per_tensor) break;
      const double theta = base[coord];
      const double h = options.step * std::max(1.0, std::abs(theta));
      std::uint64_t sig_plus = 0;
      std::uint64_t sig_minus = 0;
      const double f_plus = evaluate(which, coord, theta + h, sig_plus);
      const double f_minus = evaluate(which, coord, theta - h, sig_minus);
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++report.skipped;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double exact = analytic.at(name)[coord];
      const double denom = std::max({std::abs(exact), std::abs(numeric), options.floor});
      const double rel = std::abs(exact - numeric) / denom;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = name + "[" + std::to_string(coord) + "]";
      }
      ++report.checked;
      ++taken;
    }
    probe[which] = Var<double>(base);
  }
  return report;
}

}  // namespace dranet
