// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/autodiff.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace dranet {

/// Name -> value binding of model parameters, tracked or not.
template <typename Scalar>
class ParamVars {
 public:
  void insert(const std::string& name, Var<Scalar> v) {
    if (!index_.emplace(name, vars_.size()).second) throw ConfigError("duplicate parameter '" + name + "'");
    vars_.push_back(std::move(v));
  }
  const Var<Scalar>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
    return vars_[it->second];
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  /// Parameters registered as tape leaves.
  static ParamVars bind(Tape<Scalar>& tape, const NamedTensors<Scalar>& store) {
    ParamVars out;
    for (const auto& [name, t] : store) out.insert(name, tape.leaf(name, t));
    return out;
  }
  /// Untracked parameters for inference.
  static ParamVars constants(const NamedTensors<Scalar>& store) {
    ParamVars out;
    for (const auto& [name, t] : store) out.insert(name, Var<Scalar>(t));
    return out;
  }

 private:
  std::vector<Var<Scalar>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
struct ConvParams {
  Var<Scalar> weight;
  Var<Scalar> bias;
  ConvSpec spec;

  static ConvParams from(const ParamVars<Scalar>& p, const std::string& prefix, const ConvSpec& spec) {
    return {p.at(prefix + ".weight"), p.at(prefix + ".bias"), spec};
  }
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    return spec.transposed ? conv2d_transposed(x, weight, bias, spec) : conv2d(x, weight, bias, spec);
  }
};

/// Describes one layer for parameter allocation and counting.
struct LayerSpec {
  std::string name;
  ConvSpec spec;
};

// SAM ----------------------------------------------------------------------

template <typename Scalar>
struct SAMParams {
  ConvParams<Scalar> conv;

  static ConvSpec conv_spec() { return ConvSpec::same(2, 1); }
  static void layers(const std::string& prefix, std::vector<LayerSpec>& out) {
    out.push_back({prefix + ".conv", conv_spec()});
  }
  static SAMParams from(const ParamVars<Scalar>& p, const std::string& prefix) {
    return {ConvParams<Scalar>::from(p, prefix + ".conv", conv_spec())};
  }
};

/// x * sigmoid(conv(channel_pool(x))), mask broadcast over channels.
template <typename Scalar>
Var<Scalar> sam_forward(const Var<Scalar>& x, const SAMParams<Scalar>& p) {
  return mul(x, sigmoid(p.conv(channel_pool(x))));
}

// CAM ----------------------------------------------------------------------

template <typename Scalar>
struct CAMParams {
  ConvParams<Scalar> reduce;
  ConvParams<Scalar> expand;

  static void check(Index channels, Index ratio) {
    if (ratio < 1 || channels % ratio != 0) {
      throw ConfigError("CAM reduction ratio " + std::to_string(ratio) + " must divide channel count " +
                        std::to_string(channels));
    }
  }
  static void layers(const std::string& prefix, Index channels, Index ratio, std::vector<LayerSpec>& out) {
    check(channels, ratio);
    out.push_back({prefix + ".reduce", ConvSpec::same(channels, channels / ratio, 1)});
    out.push_back({prefix + ".expand", ConvSpec::same(channels / ratio, channels, 1)});
  }
  static CAMParams from(const ParamVars<Scalar>& p, const std::string& prefix, Index channels, Index ratio) {
    check(channels, ratio);
    return {ConvParams<Scalar>::from(p, prefix + ".reduce", ConvSpec::same(channels, channels / ratio, 1)),
            ConvParams<Scalar>::from(p, prefix + ".expand", ConvSpec::same(channels / ratio, channels, 1))};
  }
};

/// x * sigmoid(expand(relu(reduce(gap(x))))), vector broadcast over positions.
template <typename Scalar>
Var<Scalar> cam_forward(const Var<Scalar>& x, const CAMParams<Scalar>& p) {
  return mul(x, sigmoid(p.expand(relu(p.reduce(global_avg_pool(x))))));
}

// Residual stream shared by RAB and HDRAB ------------------------------------
//
// stream = conv[0](x)
// for each following pair (a, b): stream = stream + b(relu(a(relu(stream))))
//
// The stream starts from a conv output rather than from x, so a block whose
// parameters are all zero yields a zero stream and the attention output
// vanishes exactly.

template <typename Scalar>
Var<Scalar> residual_stream(const Var<Scalar>& x, const std::vector<ConvParams<Scalar>>& convs) {
  Var<Scalar> s = convs.front()(x);
  for (std::size_t i = 1; i + 1 < convs.size(); i += 2) {
    s = add(s, convs[i + 1](relu(convs[i](relu(s)))));
  }
  return s;
}

// RAB ----------------------------------------------------------------------

template <typename Scalar>
struct RABParams {
  std::vector<ConvParams<Scalar>> convs;  // 1 + 2 * pairs, all 3x3 C->C
  SAMParams<Scalar> sam;

  static Index conv_count(Index pairs) { return 1 + 2 * pairs; }
  static void layers(const std::string& prefix, Index channels, Index pairs, std::vector<LayerSpec>& out) {
    for (Index i = 0; i < conv_count(pairs); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i + 1), ConvSpec::same(channels, channels)});
    }
    SAMParams<Scalar>::layers(prefix + ".sam", out);
  }
  static RABParams from(const ParamVars<Scalar>& p, const std::string& prefix, Index channels, Index pairs) {
    RABParams r;
    for (Index i = 0; i < conv_count(pairs); ++i) {
      r.convs.push_back(
          ConvParams<Scalar>::from(p, prefix + ".conv" + std::to_string(i + 1), ConvSpec::same(channels, channels)));
    }
    r.sam = SAMParams<Scalar>::from(p, prefix + ".sam");
    return r;
  }
};

/// u + sam(stream(u))
template <typename Scalar>
Var<Scalar> rab_forward(const Var<Scalar>& u, const RABParams<Scalar>& p) {
  return add(u, sam_forward(residual_stream(u, p.convs), p.sam));
}

// HDRAB --------------------------------------------------------------------

inline const std::vector<Index>& default_hdrab_rates() {
  static const std::vector<Index> rates{1, 2, 3, 4, 3, 2, 1};
  return rates;
}

/// Rates must be odd in count (anchor conv plus residual pairs), lie in
/// [1, 4], and step by at most 1 between neighbours.
inline void check_hdrab_rates(const std::vector<Index>& rates) {
  if (rates.empty() || rates.size() % 2 == 0) {
    throw ConfigError("HDRAB needs an odd number of dilation rates, got " + std::to_string(rates.size()));
  }
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (rates[i] < 1 || rates[i] > 4) throw ConfigError("HDRAB dilation rates must lie in [1, 4]");
    if (i > 0 && std::abs(rates[i] - rates[i - 1]) > 1) {
      throw ConfigError("HDRAB dilation rates may change by at most 1 between layers");
    }
  }
}

template <typename Scalar>
struct HDRABParams {
  std::vector<ConvParams<Scalar>> convs;
  CAMParams<Scalar> cam;

  static void layers(const std::string& prefix, Index channels, const std::vector<Index>& rates, Index cam_ratio,
                     std::vector<LayerSpec>& out) {
    check_hdrab_rates(rates);
    for (std::size_t i = 0; i < rates.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i + 1), ConvSpec::same(channels, channels, 3, rates[i])});
    }
    CAMParams<Scalar>::layers(prefix + ".cam", channels, cam_ratio, out);
  }
  static HDRABParams from(const ParamVars<Scalar>& p, const std::string& prefix, Index channels,
                          const std::vector<Index>& rates, Index cam_ratio) {
    check_hdrab_rates(rates);
    HDRABParams r;
    for (std::size_t i = 0; i < rates.size(); ++i) {
      r.convs.push_back(ConvParams<Scalar>::from(p, prefix + ".conv" + std::to_string(i + 1),
                                                 ConvSpec::same(channels, channels, 3, rates[i])));
    }
    r.cam = CAMParams<Scalar>::from(p, prefix + ".cam", channels, cam_ratio);
    return r;
  }
};

/// x + cam(stream(x)) over the dilated convs.
template <typename Scalar>
Var<Scalar> hdrab_forward(const Var<Scalar>& x, const HDRABParams<Scalar>& p) {
  return add(x, cam_forward(residual_stream(x, p.convs), p.cam));
}

/// Receptive field of a chain of k x k convs with the given dilations.
inline Index dilated_chain_receptive_field(const std::vector<Index>& rates, Index kernel = 3) {
  Index rf = 1;
  for (Index d : rates) rf += (kernel - 1) * d;
  return rf;
}

}  // namespace dranet
