// SPDX-License-Identifier: Apache-2.0
#include "dranet/checkpoint.hpp"
#include "dranet/model.hpp"
#include "dranet/run_config.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <bit>

using namespace dranet;
using dranet::testing::max_rel_diff;
using dranet::testing::random_tensor;

using VarD = Var<double>;

namespace {

ModelConfig small_config(Variant v = Variant::Full) {
  ModelConfig c;
  c.width = 4;
  c.n_rab = 3;
  c.n_hdrab = 3;
  c.rab_pairs = 1;
  c.cam_ratio = 2;
  c.variant = v;
  return c;
}

/// Parameters with nonzero biases so every term matters.
NamedTensors<double> random_store(const ModelConfig& cfg, std::uint64_t seed) {
  auto store = build<double>(cfg, seed);
  Rng rng(seed + 1);
  for (auto& [name, t] : store) {
    if (name.ends_with(".bias")) t = random_tensor(rng, t.shape(), -0.1, 0.1);
  }
  return store;
}

Index enumerate_scalars(const NamedTensors<double>& store) {
  Index total = 0;
  for (const auto& [_, t] : store) total += t.n() * t.c() * t.h() * t.w();
  return total;
}

/// Hand-traced forward of small_config() built from block calls.
Tensor4d traced_forward(const NamedTensors<double>& store, const ModelConfig& cfg, const Tensor4d& y) {
  const auto p = ParamVars<double>::constants(store);
  const Index C = cfg.width;
  auto conv = [&](const std::string& name, const ConvSpec& s, const VarD& x) {
    return ConvParams<double>::from(p, name, s)(x);
  };
  auto rab = [&](int k, const VarD& x) {
    return rab_forward(x, RABParams<double>::from(p, "upper.rab" + std::to_string(k), C, cfg.rab_pairs));
  };
  auto hdrab = [&](int k, const VarD& x) {
    return hdrab_forward(
        x, HDRABParams<double>::from(p, "lower.hdrab" + std::to_string(k), C, cfg.hdrab_rates, cfg.cam_ratio));
  };
  const VarD in(y);
  // upper: head, RAB1, down, RAB2, up (+ RAB1 out), RAB3, tail
  const VarD u0 = conv("upper.head", ConvSpec::same(1, C), in);
  const VarD r1 = rab(1, u0);
  const VarD r2 = rab(2, conv("upper.down1", ConvSpec::downsample(C), r1));
  const VarD r3 = rab(3, add(conv("upper.up1", ConvSpec::upsample(C), r2), r1));
  const VarD upper = conv("upper.tail", ConvSpec::same(C, C), r3);
  // lower: head, H1, H2, H3 (input + H1 out), tail
  const VarD l0 = conv("lower.head", ConvSpec::same(1, C), in);
  const VarD h1 = hdrab(1, l0);
  const VarD h2 = hdrab(2, h1);
  const VarD h3 = hdrab(3, add(h2, h1));
  const VarD lower = conv("lower.tail", ConvSpec::same(C, C), h3);
  const VarD f = conv("fusion", ConvSpec::same(2 * C, 1), concat_channels(upper, lower));
  return sub(in, f).value();
}

}  // namespace

TEST(Build, TinyForwardKeepsShape) {
  const auto cfg = ModelConfig::tiny();
  const auto store = build<float>(cfg, 1);
  Rng rng(1);
  const Tensor4f y = random_tensor(rng, {1, 1, 64, 64}, 0.0, 1.0).cast<float>();
  EXPECT_EQ(forward(store, cfg, y).shape(), (Shape{1, 1, 64, 64}));
}

TEST(Build, ForwardKeepsShapeForMultiplesOfFour) {
  const auto cfg = small_config();
  const auto store = build<double>(cfg, 2);
  Rng rng(2);
  for (const Shape& s : {Shape{2, 1, 8, 12}, Shape{1, 1, 16, 4}}) {
    EXPECT_EQ(forward(store, cfg, random_tensor(rng, s)).shape(), s);
  }
}

TEST(Build, SameSeedIsBitIdentical) {
  const auto cfg = small_config();
  EXPECT_TRUE(build<float>(cfg, 7) == build<float>(cfg, 7));
  EXPECT_FALSE(build<float>(cfg, 7) == build<float>(cfg, 8));
}

TEST(Build, HeNormalScale) {
  ModelConfig cfg = ModelConfig::tiny();
  const auto store = build<double>(cfg, 3);
  const auto& w = store.at("upper.rab1.conv1.weight");  // fan_in = 32 * 9
  const double sd = std::sqrt(w.array().square().mean());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 288.0), 0.05 * std::sqrt(2.0 / 288.0));
  EXPECT_EQ(store.at("upper.rab1.conv1.bias").array().abs().maxCoeff(), 0.0);
}

TEST(Build, InvalidConfigIsRejected) {
  ModelConfig c = small_config();
  c.cam_ratio = 3;
  EXPECT_THROW(build<float>(c, 0), ConfigError);
  c = small_config();
  c.n_rab = 4;
  EXPECT_THROW(build<float>(c, 0), ConfigError);
  c = small_config();
  c.in_channels = 2;
  EXPECT_THROW(build<float>(c, 0), ConfigError);
}

TEST(Variants, NameAudit) {
  const auto upper = build<float>(small_config(Variant::UpperOnly), 0);
  const auto lower = build<float>(small_config(Variant::LowerOnly), 0);
  for (const auto& [name, _] : upper) EXPECT_FALSE(name.starts_with("lower.")) << name;
  for (const auto& [name, _] : lower) EXPECT_FALSE(name.starts_with("upper.")) << name;
  EXPECT_TRUE(upper.contains("upper.rab3.sam.conv.weight"));
  EXPECT_TRUE(lower.contains("lower.hdrab3.cam.expand.bias"));
  EXPECT_EQ(upper.at("fusion.weight").shape(), (Shape{1, 4, 3, 3}));
}

TEST(Variants, AllBuildAndForward) {
  Rng rng(4);
  const auto y = random_tensor(rng, {1, 1, 8, 8});
  for (Variant v : {Variant::Full, Variant::UpperOnly, Variant::LowerOnly, Variant::NoLongSkip, Variant::NoResidual}) {
    const auto cfg = small_config(v);
    const auto out = forward(build<double>(cfg, 5), cfg, y);
    EXPECT_EQ(out.shape(), y.shape()) << variant_name(v);
    EXPECT_TRUE(out.all_finite());
  }
}

TEST(Variants, BranchAblationsHaveFewerParameters) {
  for (Index width : {4, 8, 32}) {
    ModelConfig c = small_config();
    c.width = width;
    const Index full = param_count(c);
    c.variant = Variant::UpperOnly;
    EXPECT_LT(param_count(c), full);
    c.variant = Variant::LowerOnly;
    EXPECT_LT(param_count(c), full);
  }
}

TEST(Variants, SkipAndResidualAblationsAreParameterFree) {
  // long skips are additions and the residual is a subtraction, so removing
  // them removes no weights
  const Index full = param_count(small_config());
  EXPECT_EQ(param_count(small_config(Variant::NoLongSkip)), full);
  EXPECT_EQ(param_count(small_config(Variant::NoResidual)), full);
}

TEST(Variants, LongSkipsAreWired) {
  const auto store = random_store(small_config(), 6);
  Rng rng(6);
  const auto y = random_tensor(rng, {1, 1, 8, 8});
  const auto full = forward(store, small_config(), y);
  const auto no_skip = forward(store, small_config(Variant::NoLongSkip), y);
  EXPECT_GT((full.array() - no_skip.array()).abs().maxCoeff(), 1e-9);
}

TEST(Variants, NoResidualOutputsNetworkDirectly) {
  const auto store = random_store(small_config(), 7);
  Rng rng(7);
  const auto y = random_tensor(rng, {1, 1, 8, 8});
  const auto residual = forward(store, small_config(), y);
  const auto direct = forward(store, small_config(Variant::NoResidual), y);
  for (Index i = 0; i < y.size(); ++i) EXPECT_NEAR(residual[i], y[i] - direct[i], 1e-14);
}

TEST(Forward, ZeroFusionIsIdentity) {
  for (Variant v : {Variant::Full, Variant::UpperOnly, Variant::LowerOnly, Variant::NoLongSkip}) {
    const auto cfg = small_config(v);
    auto store = random_store(cfg, 8);
    store.at("fusion.weight").array() = 0.0;
    store.at("fusion.bias").array() = 0.0;
    Rng rng(8);
    const auto y = random_tensor(rng, {2, 1, 12, 8});
    EXPECT_TRUE(forward(store, cfg, y) == y) << variant_name(v);
  }
}

TEST(Forward, PerfectNoisePredictionRecoversClean) {
  Rng rng(9);
  const auto clean = random_tensor(rng, {1, 1, 8, 8}, 0.0, 1.0);
  const auto noise = random_tensor(rng, {1, 1, 8, 8}, -0.1, 0.1);
  const auto y = add(clean, noise);
  const auto out = residual_output(small_config(), VarD(y), VarD(noise)).value();
  for (Index i = 0; i < y.size(); ++i) EXPECT_NEAR(out[i], clean[i], 1e-15);
}

TEST(Forward, MatchesHandTracedComposition) {
  const auto cfg = small_config();
  for (std::uint64_t seed : {10, 11, 12}) {
    const auto store = random_store(cfg, seed);
    Rng rng(seed);
    const auto y = random_tensor(rng, {2, 1, 8, 12});
    EXPECT_LT(max_rel_diff(forward(store, cfg, y), traced_forward(store, cfg, y)), 1e-12);
  }
}

TEST(Forward, IndivisibleSizeAsksForPadding) {
  const auto cfg = small_config();
  const auto store = build<double>(cfg, 0);
  try {
    forward(store, cfg, Tensor4d(1, 1, 9, 8));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
  EXPECT_THROW(forward(store, cfg, Tensor4d(1, 3, 8, 8)), ShapeError);
}

TEST(ParamCount, SingleConv) { EXPECT_EQ(ConvSpec::same(1, 32).parameter_count(), 320); }

TEST(ParamCount, MatchesEnumeration) {
  EXPECT_EQ(param_count(ModelConfig::tiny()), enumerate_scalars(build<double>(ModelConfig::tiny(), 0)));
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig c;
    c.in_channels = rng.uniform() < 0.5 ? 1 : 3;
    c.cam_ratio = 1 + static_cast<Index>(rng.uniform_index(4));
    c.width = c.cam_ratio * (1 + static_cast<Index>(rng.uniform_index(6)));
    c.n_rab = 1 + 2 * static_cast<Index>(rng.uniform_index(3));
    c.n_hdrab = 1 + static_cast<Index>(rng.uniform_index(5));
    c.rab_pairs = static_cast<Index>(rng.uniform_index(3));
    c.variant = static_cast<Variant>(rng.uniform_index(5));
    EXPECT_EQ(param_count(c), enumerate_scalars(build<double>(c, 0))) << to_json(c).dump();
    Index by_block = 0;
    for (const auto& [_, n] : param_count_by_block(c)) by_block += n;
    EXPECT_EQ(by_block, param_count(c));
  }
}

TEST(ParamCount, DefaultGrayConfigIsReported) {
  // five 5-conv RABs and five 9-conv HDRABs of 3x3 kernels at width 128
  EXPECT_EQ(param_count(ModelConfig{}), 9428744);
}

TEST(ReceptiveField, Branches) {
  const auto rf = receptive_field(ModelConfig::tiny());
  // head 3, rab (5 + 1) 3x3 convs, tail 3
  EXPECT_EQ(rf.upper, 1 + 2 * 8);
  // head, one 33-wide chain, tail
  EXPECT_EQ(rf.lower, 3 + 32 + 2);
}

// Checkpoints ------------------------------------------------------------------

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.config = ModelConfig::tiny();
  c.config.width = 16;
  c.params = build<float>(c.config, 3);
  auto opt = AdamState<float>::for_params(c.params);
  NamedTensors<float> grads;
  Rng rng(3);
  for (const auto& [name, p] : c.params) grads.insert(name, random_tensor(rng, p.shape()).cast<float>());
  adam_step(c.params, grads, opt, 1e-3);
  c.optimizer = opt;
  c.iteration = 17;
  c.seed = 99;
  c.rng_state = rng.state();
  c.run_config = {{"note", "x"}};
  return c;
}

std::string expect_format_error(const std::string& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected a FormatError";
  return {};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = sample_checkpoint();
  const auto dir = dranet::testing::temp_dir("ckpt");
  save_checkpoint(c, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_TRUE(back == c);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, RoundTripWithoutOptimizer) {
  auto c = sample_checkpoint();
  c.optimizer.reset();
  EXPECT_TRUE(deserialize_checkpoint(serialize_checkpoint(c)) == c);
}

TEST(Checkpoint, BinaryPreamble) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "DRAN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  EXPECT_EQ(header.at("variant"), "full");
  EXPECT_EQ(header.at("iteration"), 17);
  const auto& first = header.at("tensors").at(0);
  EXPECT_EQ(first.at("name"), "param/upper.head.weight");
  EXPECT_EQ(first.at("dtype"), "f32");
  EXPECT_EQ(first.at("offset"), 0);
  // first scalar is stored little-endian right after the header
  const float w0 = sample_checkpoint().params.at("upper.head.weight")[0];
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[16 + header_len + i])) << (8 * i);
  EXPECT_EQ(std::bit_cast<float>(bits), w0);
}

TEST(Checkpoint, TruncationNamesTheSection) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_NE(expect_format_error(bytes.substr(0, 2)).find("magic"), std::string::npos);
  EXPECT_NE(expect_format_error(bytes.substr(0, 10)).find("preamble"), std::string::npos);
  EXPECT_NE(expect_format_error(bytes.substr(0, 40)).find("header"), std::string::npos);
  EXPECT_NE(expect_format_error(bytes.substr(0, bytes.size() - 3)).find("tensor data"), std::string::npos);
  EXPECT_NE(expect_format_error(bytes + "x").find("trailing"), std::string::npos);
}

TEST(Checkpoint, UnsupportedVersion) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[4] = 2;
  const std::string msg = expect_format_error(bytes);
  EXPECT_NE(msg.find("unsupported version 2"), std::string::npos) << msg;
}

TEST(Checkpoint, BadMagic) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_NE(expect_format_error(bytes).find("magic"), std::string::npos);
}

TEST(Checkpoint, LoadOfMissingFileIsADataError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), DataError);
}
