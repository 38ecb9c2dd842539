#include <gtest/gtest.h>

#include <array>

#include "dfs/errors.hpp"
#include "dfs/model.hpp"
#include "dfs/train.hpp"

using namespace dfs;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor x = Tensor::matrix(n, d);
  for (double& v : x.data()) v = rng.normal();
  return x;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t k, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng.below(k);
  return y;
}

ModelConfig small_config(WiringMode mode) {
  ModelConfig c;
  c.layers = 3;
  c.widths = {6, 5, 7};
  c.input_dim = 3;
  c.classes = 3;
  c.beta = 0.4;
  c.mode = mode;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(Partition, Examples) {
  EXPECT_EQ(partition_channels(64, 0.5), (ChannelSplit{32, 32}));
  EXPECT_EQ(partition_channels(8, 0.05), (ChannelSplit{1, 7}));
  EXPECT_EQ(partition_channels(5, 0.3), (ChannelSplit{2, 3}));
  EXPECT_EQ(partition_channels(8, 0.99), (ChannelSplit{7, 1}));
  EXPECT_THROW(partition_channels(1, 0.5), ConfigError);
}

TEST(Build, PartitionShapes) {
  ModelConfig c;
  c.mode = WiringMode::dfs;
  const Model m = build(c);
  for (std::size_t i = 0; i + 1 < c.layers; ++i) {
    EXPECT_EQ(m.layers[i].split, 16u);
    EXPECT_EQ(m.heads[i].feat_dim(), 32u);
  }
  EXPECT_FALSE(m.layers.back().partitioned());

  c.mode = WiringMode::partition_only;
  c.beta = 0.25;
  const Model p = build(c);
  for (std::size_t i = 0; i + 1 < c.layers; ++i) {
    EXPECT_EQ(p.heads[i].feat_dim(), 24u);
    EXPECT_EQ(p.layers[i + 1].in_dim(), 8u);
  }

  c.mode = WiringMode::joint;
  const Model j = build(c);
  for (std::size_t i = 0; i < c.layers; ++i) {
    EXPECT_FALSE(j.layers[i].partitioned());
    EXPECT_EQ(j.heads[i].feat_dim(), 32u);
  }
}

TEST(Build, ConfigValidation) {
  ModelConfig c;
  c.widths = {32, 32};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.beta = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.widths[1] = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, ExitShapes) {
  ModelConfig c;
  c.layers = 2;
  c.widths = {4, 4};
  c.classes = 3;
  const Model m = build(c);
  GradTape tape;
  const ExitOutputs out = forward(m, random_input(2, 2, 1), tape);
  ASSERT_EQ(out.logits.size(), 2u);
  for (Var l : out.logits) EXPECT_EQ(tape.value(l).shape(), (Shape{2, 3}));
}

TEST(Forward, DfsEqualsJointBitwise) {
  RngStream meta(99);
  for (int trial = 0; trial < 25; ++trial) {
    ModelConfig c;
    c.layers = 2 + meta.below(3);
    c.widths.clear();
    for (std::size_t i = 0; i < c.layers; ++i) c.widths.push_back(2 + meta.below(12));
    c.input_dim = 1 + meta.below(4);
    c.classes = 2 + meta.below(4);
    c.beta = 0.05 + 0.9 * meta.uniform();
    c.bias = meta.below(2) == 1;
    c.mode = WiringMode::dfs;
    c.seed = meta.next_u64();
    Model dfs = build(c);
    if (c.bias) {
      for (auto& p : dfs.parameters()) {
        if (!p.decay) {
          for (double& v : p.value->data()) v = meta.normal();
        }
      }
    }
    Model joint = dfs;
    joint.config.mode = WiringMode::joint;
    for (auto& l : joint.layers) l.split = l.w.cols();
    const Tensor x = random_input(5, c.input_dim, trial);
    GradTape ta, tb;
    const auto a = forward(dfs, x, ta).values(ta);
    const auto b = forward(joint, x, tb).values(tb);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t e = 0; e < a.size(); ++e) EXPECT_TRUE(a[e].bitwise_equal(b[e])) << "exit " << e;
    Model hsg = dfs;
    hsg.config.head_shared_grad = true;
    GradTape tc;
    const auto d = forward(hsg, x, tc).values(tc);
    for (std::size_t e = 0; e < a.size(); ++e) EXPECT_TRUE(a[e].bitwise_equal(d[e]));
  }
}

TEST(Routing, DfsStructuralZeros) {
  const Model m = build(small_config(WiringMode::dfs));
  const RoutingReport r = routing_check(m, random_input(6, 3, 2), random_labels(6, 3, 3));
  EXPECT_FALSE(r.checks.empty());
}

TEST(Routing, SharedGradientHeadIsCaught) {
  ModelConfig c = small_config(WiringMode::dfs);
  c.head_shared_grad = true;
  const Model m = build(c);
  EXPECT_THROW(routing_check(m, random_input(6, 3, 2), random_labels(6, 3, 3)), RoutingViolation);
}

TEST(Routing, JointFirstLossReachesFirstLayer) {
  const Model m = build(small_config(WiringMode::joint));
  EXPECT_NO_THROW(routing_check(m, random_input(6, 3, 2), random_labels(6, 3, 3)));
  GradTape tape;
  const ExitOutputs out = forward(m, random_input(6, 3, 2), tape);
  const auto labels = random_labels(6, 3, 3);
  const auto losses = exit_losses(tape, out, labels);
  const GradMap g = tape.backward(std::array{losses[0]}, out.params);
  double norm = 0.0;
  for (double v : g.at(out.params[0].id).data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Routing, PartitionOnlyIsolatesEarlyExits) {
  Model m = build(small_config(WiringMode::partition_only));
  const Tensor x = random_input(6, 3, 2);
  const auto labels = random_labels(6, 3, 3);
  EXPECT_NO_THROW(routing_check(m, x, labels));
  GradTape tape;
  const ExitOutputs out = forward(m, x, tape);
  const auto losses = exit_losses(tape, out, labels);
  const GradMap g = tape.backward(std::array{losses[0]}, out.params);
  // Loss 1 touches only layer 1 and head 1.
  auto params = m.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].name;
    if (name.starts_with("layer1.") || name.starts_with("head1.")) continue;
    const Tensor& grad = g.at(out.params[p].id);
    EXPECT_TRUE(grad.bitwise_equal(Tensor(grad.shape()))) << name;
  }
}

TEST(Routing, FiniteDifferenceAgreesOnDfsNet) {
  Model m = build(small_config(WiringMode::dfs));
  const Tensor x = random_input(5, 3, 12);
  const auto labels = random_labels(5, 3, 13);
  GradTape tape;
  const ExitOutputs out = forward(m, x, tape);
  const auto losses = exit_losses(tape, out, labels);
  const GradMap g = tape.backward(losses, out.params);
  const LossFn fn = [&](GradTape& t) { return exit_losses(t, forward(m, x, t), labels); };
  auto params = m.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    EXPECT_LE(max_relative_error(g.at(out.params[p].id), detach_aware_fd_gradient(fn, *params[p].value)),
              1e-4)
        << params[p].name;
  }
}

TEST(ColumnView, WritesThroughToWeight) {
  ModelConfig c;
  Model m = build(c);
  auto& layer = m.layers[0];
  layer.specific().at(0, 0) = 42.0;
  EXPECT_EQ(layer.w.at(0, layer.split), 42.0);
  layer.shared().at(1, 2) = -7.0;
  EXPECT_EQ(layer.w.at(1, 2), -7.0);
  EXPECT_EQ(layer.shared().cols() + layer.specific().cols(), layer.w.cols());
  EXPECT_EQ(layer.specific().copy(), slice_cols(layer.w, layer.split, layer.w.cols()));
}

TEST(Build, DeterministicPerSeed) {
  ModelConfig c;
  c.seed = 5;
  EXPECT_TRUE(bitwise_equal(build(c), build(c)));
  ModelConfig d = c;
  d.seed = 6;
  EXPECT_FALSE(bitwise_equal(build(c), build(d)));
}
