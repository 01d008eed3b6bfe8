// SPDX-License-Identifier: Apache-2.0
#include "dranet/gradcheck_suite.hpp"

#include "dranet/blocks.hpp"
#include "dranet/losses.hpp"
#include "dranet/model.hpp"
#include "dranet/rng.hpp"

#include <functional>

namespace dranet {

namespace {

using VarD = Var<double>;
using Inputs = std::span<const VarD>;

Tensor4d random_tensor(Rng& rng, const Shape& shape, double stddev = 1.0, double mean = 0.0) {
  Tensor4d t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = mean + stddev * rng.normal();
  return t;
}

/// Reduces a tensor output to a scalar through a fixed random projection so
/// every output coordinate carries a distinct weight.
VarD project(const VarD& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(out, VarD(random_tensor(rng, out.shape()))));
}

struct Item {
  std::string name;
  std::string group;
  std::function<void(NamedTensors<double>&, Rng&)> make_inputs;
  ScalarFn fn;
};

void add_conv_params(NamedTensors<double>& in, Rng& rng, const std::string& prefix, const ConvSpec& spec,
                     double scale = 0.5) {
  in.insert(prefix + ".weight", random_tensor(rng, spec.weight_shape(), scale));
  in.insert(prefix + ".bias", random_tensor(rng, spec.bias_shape(), 0.1));
}

ParamVars<double> as_params(const NamedTensors<double>& names, Inputs v) {
  ParamVars<double> p;
  for (std::size_t i = 0; i < names.size(); ++i) p.insert(names[i].first, v[i]);
  return p;
}

std::vector<Item> build_items() {
  std::vector<Item> items;
  auto unary = [&](std::string name, Shape shape, std::function<VarD(const VarD&)> op) {
    items.push_back({name, "primitive",
                     [shape](NamedTensors<double>& in, Rng& rng) { in.insert("x", random_tensor(rng, shape)); },
                     [op](Inputs v) { return project(op(v[0]), 11); }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb, std::function<VarD(const VarD&, const VarD&)> op) {
    items.push_back({name, "primitive",
                     [sa, sb](NamedTensors<double>& in, Rng& rng) {
                       in.insert("a", random_tensor(rng, sa));
                       in.insert("b", random_tensor(rng, sb));
                     },
                     [op](Inputs v) { return project(op(v[0], v[1]), 12); }});
  };
  auto conv = [&](std::string name, Shape input, ConvSpec spec) {
    items.push_back({name, "primitive",
                     [input, spec](NamedTensors<double>& in, Rng& rng) {
                       in.insert("x", random_tensor(rng, input));
                       add_conv_params(in, rng, "conv", spec);
                     },
                     [spec](Inputs v) {
                       ConvParams<double> c{v[1], v[2], spec};
                       return project(c(v[0]), 13);
                     }});
  };

  conv("conv2d", {2, 3, 6, 6}, ConvSpec::same(3, 4));
  conv("conv2d_dilated", {1, 2, 9, 9}, ConvSpec::same(2, 3, 3, 3));
  conv("conv2d_strided", {2, 2, 6, 6}, ConvSpec::downsample(2));
  conv("conv2d_transposed", {2, 3, 3, 3}, ConvSpec::upsample(3));
  conv("conv2d_transposed_overlap", {1, 2, 4, 4}, ConvSpec{3, 3, 2, 1, 1, 2, 3, true});
  binary("add", {2, 3, 4, 4}, {2, 3, 4, 4}, [](const VarD& a, const VarD& b) { return add(a, b); });
  binary("add_broadcast", {2, 3, 4, 4}, {2, 3, 1, 1}, [](const VarD& a, const VarD& b) { return add(a, b); });
  binary("sub", {2, 3, 4, 4}, {2, 1, 4, 4}, [](const VarD& a, const VarD& b) { return sub(a, b); });
  binary("mul", {2, 3, 4, 4}, {2, 3, 4, 4}, [](const VarD& a, const VarD& b) { return mul(a, b); });
  binary("mul_spatial_mask", {2, 3, 4, 4}, {2, 1, 4, 4}, [](const VarD& a, const VarD& b) { return mul(a, b); });
  binary("mul_channel_mask", {2, 3, 4, 4}, {2, 3, 1, 1}, [](const VarD& a, const VarD& b) { return mul(a, b); });
  binary("concat_channels", {2, 3, 4, 4}, {2, 2, 4, 4},
         [](const VarD& a, const VarD& b) { return concat_channels(a, b); });
  unary("relu", {2, 3, 4, 4}, [](const VarD& x) { return relu(x); });
  unary("sigmoid", {2, 3, 4, 4}, [](const VarD& x) { return sigmoid(x); });
  unary("scale", {2, 3, 4, 4}, [](const VarD& x) { return scale(x, 0.3); });
  unary("global_avg_pool", {2, 3, 4, 4}, [](const VarD& x) { return global_avg_pool(x); });
  unary("global_max_pool", {2, 3, 4, 4}, [](const VarD& x) { return global_max_pool(x); });
  unary("channel_pool", {2, 5, 3, 3}, [](const VarD& x) { return channel_pool(x); });
  unary("sum", {2, 3, 4, 4}, [](const VarD& x) { return scale(sum_all(x), 1.0); });
  unary("mean", {2, 3, 4, 4}, [](const VarD& x) { return mean_all(x); });

  // blocks
  items.push_back({"sam", "block",
                   [](NamedTensors<double>& in, Rng& rng) {
                     in.insert("x", random_tensor(rng, {2, 4, 5, 5}));
                     add_conv_params(in, rng, "sam.conv", SAMParams<double>::conv_spec());
                   },
                   [](Inputs v) {
                     return project(sam_forward(v[0], SAMParams<double>{{v[1], v[2], SAMParams<double>::conv_spec()}}),
                                    21);
                   }});
  items.push_back({"cam", "block",
                   [](NamedTensors<double>& in, Rng& rng) {
                     in.insert("x", random_tensor(rng, {2, 8, 4, 4}));
                     std::vector<LayerSpec> layers;
                     CAMParams<double>::layers("cam", 8, 4, layers);
                     for (const auto& l : layers) add_conv_params(in, rng, l.name, l.spec);
                   },
                   [](Inputs v) {
                     return project(cam_forward(v[0], CAMParams<double>{{v[1], v[2], ConvSpec::same(8, 2, 1)},
                                                                        {v[3], v[4], ConvSpec::same(2, 8, 1)}}),
                                    22);
                   }});

  auto block_inputs = [](std::function<void(std::vector<LayerSpec>&)> layers_of, Shape x) {
    return [layers_of, x](NamedTensors<double>& in, Rng& rng) {
      in.insert("x", random_tensor(rng, x));
      std::vector<LayerSpec> layers;
      layers_of(layers);
      for (const auto& l : layers) add_conv_params(in, rng, l.name, l.spec, 0.3);
    };
  };
  // parameter names are recovered from a fresh input set built with the same generator
  auto names_of = [](const std::function<void(NamedTensors<double>&, Rng&)>& make) {
    NamedTensors<double> in;
    Rng rng(0);
    make(in, rng);
    return in;
  };

  {
    auto make = block_inputs([](auto& l) { RABParams<double>::layers("rab", 4, 2, l); }, {2, 4, 6, 6});
    auto names = names_of(make);
    items.push_back({"rab", "block", make, [names](Inputs v) {
                       const auto p = as_params(names, v);
                       return project(rab_forward(v[0], RABParams<double>::from(p, "rab", 4, 2)), 23);
                     }});
  }
  {
    auto make = block_inputs(
        [](auto& l) { HDRABParams<double>::layers("hdrab", 4, default_hdrab_rates(), 2, l); }, {1, 4, 9, 9});
    auto names = names_of(make);
    items.push_back({"hdrab", "block", make, [names](Inputs v) {
                       const auto p = as_params(names, v);
                       return project(
                           hdrab_forward(v[0], HDRABParams<double>::from(p, "hdrab", 4, default_hdrab_rates(), 2)),
                           24);
                     }});
  }

  // losses
  auto loss_item = [&](std::string name, std::function<VarD(const VarD&, const VarD&)> fn) {
    items.push_back({name, "loss",
                     [](NamedTensors<double>& in, Rng& rng) {
                       in.insert("pred", random_tensor(rng, {2, 1, 6, 6}, 0.2, 0.5));
                       in.insert("target", random_tensor(rng, {2, 1, 6, 6}, 0.2, 0.5));
                     },
                     [fn](Inputs v) { return fn(v[0], v[1]); }});
  };
  loss_item("mse_loss", [](const VarD& p, const VarD& t) { return mse_loss(p, t); });
  loss_item("charbonnier", [](const VarD& p, const VarD& t) { return charbonnier(p, t, 1e-3); });
  loss_item("laplacian", [](const VarD& p, const VarD&) { return project(laplacian(p), 31); });
  loss_item("edge_loss", [](const VarD& p, const VarD& t) { return edge_loss(p, t, 1e-3); });
  loss_item("total_loss", [](const VarD& p, const VarD& t) {
    LossConfig cfg;
    cfg.mode = LossMode::CharbonnierEdge;
    return total_loss(p, t, cfg);
  });

  auto model_item = [&](const std::string& name, const ModelConfig& cfg) {
    auto make = [cfg](NamedTensors<double>& in, Rng& rng) {
      in.insert("y", random_tensor(rng, {1, 1, 8, 8}, 0.2, 0.5));
      for (auto& [pname, t] : build<double>(cfg, rng.next_u64())) {
        // nonzero biases so every bias gradient is exercised
        if (pname.ends_with(".bias")) t = random_tensor(rng, t.shape(), 0.1);
        in.insert(pname, t);
      }
    };
    auto names = names_of(make);
    items.push_back({name, "model", make, [cfg, names](Inputs v) {
                       const auto p = as_params(names, v);
                       Rng rng(41);
                       const VarD target(random_tensor(rng, v[0].shape(), 0.2, 0.5));
                       return mse_loss(forward(p, cfg, v[0]), target);
                     }});
  };
  // two scale levels and long skips in both branches
  {
    ModelConfig cfg;
    cfg.width = 4;
    cfg.n_rab = 3;
    cfg.n_hdrab = 3;
    cfg.rab_pairs = 1;
    cfg.cam_ratio = 2;
    model_item("model", cfg);
  }
  model_item("tiny_model", ModelConfig::tiny());
  return items;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& item : build_items()) names.push_back(item.name);
  return names;
}

std::vector<GradcheckResult> run_gradcheck(const std::string& scope) {
  const auto items = build_items();
  std::vector<GradcheckResult> results;
  for (const auto& item : items) {
    if (scope != "all" && scope != item.name && scope != item.group) continue;
    NamedTensors<double> inputs;
    Rng rng(0);
    item.make_inputs(inputs, rng);
    GradcheckResult r{item.name, item.group, finite_diff_check(item.fn, inputs), false};
    r.passed = r.report.checked > 0 && r.report.max_rel_error < kGradcheckTolerance;
    results.push_back(std::move(r));
  }
  if (results.empty()) throw ConfigError("unknown gradcheck item '" + scope + "'");
  return results;
}

}  // namespace dranet
