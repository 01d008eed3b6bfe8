// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/blocks.hpp"
#include "dranet/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace dranet {

/// Architecture ablations.
enum class Variant { Full, UpperOnly, LowerOnly, NoLongSkip, NoResidual };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::UpperOnly: return "upper_only";
    case Variant::LowerOnly: return "lower_only";
    case Variant::NoLongSkip: return "no_long_skip";
    case Variant::NoResidual: return "no_residual";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::UpperOnly, Variant::LowerOnly, Variant::NoLongSkip, Variant::NoResidual}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  Index in_channels = 1;
  Index width = 128;
  /// Odd: (n_rab - 1) / 2 downsampling levels, mirrored by as many upsamplings.
  Index n_rab = 5;
  Index n_hdrab = 5;
  /// Each RAB holds 1 + 2 * rab_pairs convolutions.
  Index rab_pairs = 2;
  std::vector<Index> hdrab_rates = default_hdrab_rates();
  Index cam_ratio = 16;
  Variant variant = Variant::Full;

  bool operator==(const ModelConfig&) const = default;

  bool has_upper() const { return variant != Variant::LowerOnly; }
  bool has_lower() const { return variant != Variant::UpperOnly; }
  bool long_skips() const { return variant != Variant::NoLongSkip; }
  bool residual() const { return variant != Variant::NoResidual; }
  Index scale_levels() const { return (n_rab - 1) / 2; }
  /// Input height and width must be multiples of this.
  Index size_multiple() const { return has_upper() ? (Index{1} << scale_levels()) : 1; }

  void validate() const {
    if (in_channels != 1 && in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
    if (width < 1) throw ConfigError("width must be >= 1");
    if (n_rab < 1 || n_rab % 2 == 0) throw ConfigError("n_rab must be odd and >= 1");
    if (n_hdrab < 1) throw ConfigError("n_hdrab must be >= 1");
    if (rab_pairs < 0) throw ConfigError("rab_pairs must be >= 0");
    check_hdrab_rates(hdrab_rates);
    CAMParams<float>::check(width, cam_ratio);
  }

  /// Desk-scale preset: width 32, one RAB, one HDRAB.
  static ModelConfig tiny() {
    ModelConfig c;
    c.width = 32;
    c.n_rab = 1;
    c.n_hdrab = 1;
    return c;
  }
};

/// Every convolution of the network in allocation order.
inline std::vector<LayerSpec> model_layers(const ModelConfig& cfg) {
  cfg.validate();
  const Index C = cfg.width;
  std::vector<LayerSpec> layers;
  if (cfg.has_upper()) {
    layers.push_back({"upper.head", ConvSpec::same(cfg.in_channels, C)});
    const Index levels = cfg.scale_levels();
    for (Index k = 1; k <= cfg.n_rab; ++k) {
      RABParams<float>::layers("upper.rab" + std::to_string(k), C, cfg.rab_pairs, layers);
      if (k <= levels) layers.push_back({"upper.down" + std::to_string(k), ConvSpec::downsample(C)});
      if (k > levels && k < cfg.n_rab) {
        layers.push_back({"upper.up" + std::to_string(k - levels), ConvSpec::upsample(C)});
      }
    }
    layers.push_back({"upper.tail", ConvSpec::same(C, C)});
  }
  if (cfg.has_lower()) {
    layers.push_back({"lower.head", ConvSpec::same(cfg.in_channels, C)});
    for (Index k = 1; k <= cfg.n_hdrab; ++k) {
      HDRABParams<float>::layers("lower.hdrab" + std::to_string(k), C, cfg.hdrab_rates, cfg.cam_ratio, layers);
    }
    layers.push_back({"lower.tail", ConvSpec::same(C, C)});
  }
  const Index fused = (cfg.has_upper() && cfg.has_lower()) ? 2 * C : C;
  layers.push_back({"fusion", ConvSpec::same(fused, cfg.in_channels)});
  return layers;
}

/// Closed form: sum over convolutions of out*in*kh*kw + out.
inline Index param_count(const ModelConfig& cfg) {
  Index total = 0;
  for (const auto& layer : model_layers(cfg)) total += layer.spec.parameter_count();
  return total;
}

/// Parameter count per top-level block ("upper.rab1", "lower.head", ...).
inline std::vector<std::pair<std::string, Index>> param_count_by_block(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Index>> out;
  for (const auto& layer : model_layers(cfg)) {
    const auto first = layer.name.find('.');
    const auto second = first == std::string::npos ? std::string::npos : layer.name.find('.', first + 1);
    const std::string block = layer.name.substr(0, second);
    if (out.empty() || out.back().first != block) out.emplace_back(block, 0);
    out.back().second += layer.spec.parameter_count();
  }
  return out;
}

/// He-normal weights (std = sqrt(2 / (in_ch * kh * kw))), zero biases.
template <typename Scalar>
NamedTensors<Scalar> build(const ModelConfig& cfg, std::uint64_t seed) {
  const auto layers = model_layers(cfg);
  Rng rng(seed);
  NamedTensors<Scalar> store;
  for (const auto& layer : layers) {
    Tensor4<Scalar> weight(layer.spec.weight_shape());
    const double stddev = std::sqrt(2.0 / static_cast<double>(layer.spec.in_ch * layer.spec.kh * layer.spec.kw));
    for (Index i = 0; i < weight.size(); ++i) weight[i] = static_cast<Scalar>(stddev * rng.normal());
    store.insert(layer.name + ".weight", std::move(weight));
    store.insert(layer.name + ".bias", Tensor4<Scalar>(layer.spec.bias_shape()));
  }
  return store;
}

/// Checks that a store holds exactly the parameters of `cfg` with the right shapes.
template <typename Scalar>
void check_store(const ModelConfig& cfg, const NamedTensors<Scalar>& store) {
  const auto layers = model_layers(cfg);
  if (store.size() != 2 * layers.size()) {
    throw ConfigError("parameter store has " + std::to_string(store.size()) + " tensors, config expects " +
                      std::to_string(2 * layers.size()));
  }
  for (const auto& layer : layers) {
    for (const auto& [suffix, shape] :
         {std::pair{".weight", layer.spec.weight_shape()}, std::pair{".bias", layer.spec.bias_shape()}}) {
      const std::string name = layer.name + suffix;
      if (!store.contains(name)) throw ConfigError("parameter store lacks '" + name + "'");
      if (store.at(name).shape() != shape) {
        throw ConfigError("parameter '" + name + "' has shape " + store.at(name).shape().str() + ", expected " +
                          shape.str());
      }
    }
  }
}

template <typename Scalar>
Var<Scalar> upper_branch(const ParamVars<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& y) {
  const Index C = cfg.width;
  const Index levels = cfg.scale_levels();
  auto rab = [&](Index k, const Var<Scalar>& x) {
    return rab_forward(x, RABParams<Scalar>::from(p, "upper.rab" + std::to_string(k), C, cfg.rab_pairs));
  };
  Var<Scalar> h = ConvParams<Scalar>::from(p, "upper.head", ConvSpec::same(cfg.in_channels, C))(y);
  std::vector<Var<Scalar>> skips;
  for (Index k = 1; k <= levels; ++k) {
    h = rab(k, h);
    skips.push_back(h);
    h = ConvParams<Scalar>::from(p, "upper.down" + std::to_string(k), ConvSpec::downsample(C))(h);
  }
  h = rab(levels + 1, h);
  for (Index j = 1; j <= levels; ++j) {
    h = ConvParams<Scalar>::from(p, "upper.up" + std::to_string(j), ConvSpec::upsample(C))(h);
    if (cfg.long_skips()) h = add(h, skips[static_cast<std::size_t>(levels - j)]);
    h = rab(levels + 1 + j, h);
  }
  return ConvParams<Scalar>::from(p, "upper.tail", ConvSpec::same(C, C))(h);
}

/// Block k's input receives the output of block n+1-k when that block is at
/// least two positions earlier.
template <typename Scalar>
Var<Scalar> lower_branch(const ParamVars<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& y) {
  const Index C = cfg.width;
  Var<Scalar> h = ConvParams<Scalar>::from(p, "lower.head", ConvSpec::same(cfg.in_channels, C))(y);
  std::vector<Var<Scalar>> outputs;
  for (Index k = 1; k <= cfg.n_hdrab; ++k) {
    const Index partner = cfg.n_hdrab + 1 - k;
    if (cfg.long_skips() && partner <= k - 2) h = add(h, outputs[static_cast<std::size_t>(partner - 1)]);
    h = hdrab_forward(h, HDRABParams<Scalar>::from(p, "lower.hdrab" + std::to_string(k), C, cfg.hdrab_rates,
                                                   cfg.cam_ratio));
    outputs.push_back(h);
  }
  return ConvParams<Scalar>::from(p, "lower.tail", ConvSpec::same(C, C))(h);
}

inline void check_input(const ModelConfig& cfg, const Shape& y) {
  if (y.c != cfg.in_channels) {
    throw ShapeError("input has " + std::to_string(y.c) + " channels, model expects " +
                     std::to_string(cfg.in_channels));
  }
  const Index m = cfg.size_multiple();
  if (y.h % m != 0 || y.w % m != 0) {
    throw ShapeError("input " + std::to_string(y.h) + "x" + std::to_string(y.w) + " is not a multiple of " +
                     std::to_string(m) + "; pad the image (e.g. reflectively) before the forward pass");
  }
}

/// The fused two-branch network f(y): the predicted noise.
template <typename Scalar>
Var<Scalar> network(const ParamVars<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& y) {
  cfg.validate();
  check_input(cfg, y.shape());
  const Index fused = (cfg.has_upper() && cfg.has_lower()) ? 2 * cfg.width : cfg.width;
  const auto fusion = ConvParams<Scalar>::from(p, "fusion", ConvSpec::same(fused, cfg.in_channels));
  if (!cfg.has_lower()) return fusion(upper_branch(p, cfg, y));
  if (!cfg.has_upper()) return fusion(lower_branch(p, cfg, y));
  return fusion(concat_channels(upper_branch(p, cfg, y), lower_branch(p, cfg, y)));
}

/// y - f(y), or f(y) itself for the no-residual variant.
template <typename Scalar>
Var<Scalar> residual_output(const ModelConfig& cfg, const Var<Scalar>& y, const Var<Scalar>& f) {
  return cfg.residual() ? sub(y, f) : f;
}

template <typename Scalar>
Var<Scalar> forward(const ParamVars<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& y) {
  return residual_output(cfg, y, network(p, cfg, y));
}

/// Untracked inference.
template <typename Scalar>
Tensor4<Scalar> forward(const NamedTensors<Scalar>& store, const ModelConfig& cfg, const Tensor4<Scalar>& y) {
  return forward(ParamVars<Scalar>::constants(store), cfg, Var<Scalar>(y)).value();
}

struct ReceptiveField {
  Index upper = 0;
  Index lower = 0;
};

/// Local receptive field per branch along the main path, in input pixels.
/// Global pooling inside CAM is not counted.
inline ReceptiveField receptive_field(const ModelConfig& cfg) {
  cfg.validate();
  ReceptiveField rf;
  if (cfg.has_upper()) {
    Index field = 1;
    Index jump = 1;
    auto conv = [&](Index k, Index d) { field += (k - 1) * d * jump; };
    auto rab = [&] {
      for (Index i = 0; i < RABParams<float>::conv_count(cfg.rab_pairs); ++i) conv(3, 1);
      conv(3, 1);  // SAM
    };
    conv(3, 1);
    const Index levels = cfg.scale_levels();
    for (Index k = 1; k <= levels; ++k) {
      rab();
      conv(2, 1);
      jump *= 2;
    }
    rab();
    for (Index j = 1; j <= levels; ++j) {
      jump /= 2;
      rab();
    }
    conv(3, 1);
    rf.upper = field;
  }
  if (cfg.has_lower()) {
    Index field = 1 + 2;
    for (Index k = 0; k < cfg.n_hdrab; ++k) field += dilated_chain_receptive_field(cfg.hdrab_rates) - 1;
    rf.lower = field + 2;
  }
  return rf;
}

}  // namespace dranet
