#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "ulsam/cost.hpp"
#include "ulsam/graph.hpp"
#include "ulsam/network.hpp"
#include "ulsam/train.hpp"

using namespace ulsam;
using ulsam::testing::random_tensor;

namespace {

/// Output of the last layer before global average pooling.
template <typename Scalar>
Shape pre_pool_shape(Network<Scalar>& net, Index size) {
  Tensor<Scalar> x(1, 3, size, size);
  const auto& layers = net.graph().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::GlobalAvgPool) break;
    x = net.layer(i).forward(x, Mode::Infer);
  }
  return x.shape();
}

}  // namespace

TEST(PositionDirective, Grammar) {
  EXPECT_EQ(PositionDirective::parse("11"), (PositionDirective{11, PositionDirective::Mode::Substitute}));
  EXPECT_EQ(PositionDirective::parse("8:1"), (PositionDirective{8, PositionDirective::Mode::InsertAfter}));
  EXPECT_EQ(PositionDirective::parse("8:1").to_string(), "8:1");
  for (const char* bad : {"9:2", "", ":1", "x", "0", "-3", "8:", "8:1:1", " 8"}) {
    EXPECT_THROW(PositionDirective::parse(bad), DirectiveError) << bad;
  }
  const auto csv = parse_positions_csv("8:1,9:1,11");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[2].layer, 11);
}

TEST(BuildMv1, LayerNumberingAndStem) {
  const ModelGraph g = build_mv1(1.0, 1000);
  for (int number = 1; number <= 14; ++number) EXPECT_TRUE(g.find_numbered(number)) << number;
  EXPECT_FALSE(g.find_numbered(15));
  const LayerSpec& stem = g.layers.front();
  EXPECT_EQ(stem.kind, LayerKind::Conv2d);
  EXPECT_EQ(stem.kernel, 3);
  EXPECT_EQ(stem.stride, 2);
  EXPECT_EQ(stem.out_channels, 32);
  EXPECT_EQ(g.output_channels(), 1000);
}

TEST(BuildMv1, WidthMultiplierScalesChannels) {
  EXPECT_EQ(build_mv1(0.5, 10).layers.front().out_channels, 16);
  EXPECT_EQ(build_mv1(0.25, 10).layers[*build_mv1(0.25, 10).find_numbered(14)].out_channels, 256);
  EXPECT_THROW(build_mv1(0.0, 10), ConfigError);
  EXPECT_THROW(build_mv1(-0.5, 10), ConfigError);
}

TEST(BuildMv2, SkipConnectionsExactlyWhereShapeIsKept) {
  const ModelGraph g = build_mv2(1000);
  for (int number = 1; number <= 20; ++number) EXPECT_TRUE(g.find_numbered(number)) << number;
  for (const auto& l : g.layers) {
    if (l.kind != LayerKind::ResidualBottleneck) continue;
    EXPECT_EQ(l.has_skip(), l.stride == 1 && l.in_channels == l.out_channels) << l.label;
  }
  for (int number : {6, 7, 9, 10, 11}) {
    EXPECT_TRUE(g.layers[*g.find_numbered(number)].has_skip()) << number;
  }
  EXPECT_FALSE(g.layers[*g.find_numbered(8)].has_skip());
}

TEST(ApplyUlsam, InsertAndSubstitute) {
  const ModelGraph g = apply_ulsam(build_mv1(1.0, 1000), parse_positions_csv("8:1,9:1,11"), 4);
  EXPECT_EQ(g.ulsam_positions(), (std::vector<std::string>{"8:1", "9:1", "11"}));
  const LayerSpec& sub = g.layers[*g.find_numbered(11)];
  EXPECT_EQ(sub.kind, LayerKind::Ulsam);
  EXPECT_EQ(sub.groups, 4);
  ASSERT_EQ(sub.replaced.size(), 1u);
  EXPECT_EQ(sub.replaced.front().kind, LayerKind::DwsBlock);
  const std::size_t eight = *g.find_numbered(8);
  EXPECT_EQ(g.layers[eight + 1].label, "8:1");
}

TEST(ApplyUlsam, RejectsShapeChangingSubstitution) {
  const ModelGraph mv1 = build_mv1(1.0, 1000);
  EXPECT_THROW(apply_ulsam(mv1, parse_positions_csv("13"), 4), DirectiveError);  // stride 2
  EXPECT_THROW(apply_ulsam(mv1, parse_positions_csv("2"), 4), DirectiveError);   // 32 -> 64
  EXPECT_THROW(apply_ulsam(mv1, parse_positions_csv("99"), 4), DirectiveError);
  EXPECT_THROW(apply_ulsam(mv1, parse_positions_csv("8:1,8:1"), 4), DirectiveError);
  EXPECT_THROW(apply_ulsam(mv1, parse_positions_csv("8:1"), 3), DirectiveError);
  EXPECT_THROW(apply_ulsam(build_mv2(1000), parse_positions_csv("15"), 4), DirectiveError);
}

TEST(ApplyUlsam, RemovingRestoresTheCostReport) {
  const ModelGraph base = build_mv1(1.0, 1000);
  const CostReport before = analyze_model(base);
  for (const char* text : {"8:1", "11"}) {
    const auto d = PositionDirective::parse(text);
    const ModelGraph placed = apply_ulsam(base, {d}, 4);
    EXPECT_NE(analyze_model(placed).total_macs, before.total_macs);
    const CostReport after = analyze_model(remove_ulsam(placed, d));
    EXPECT_EQ(after.total_params, before.total_params) << text;
    EXPECT_EQ(after.total_macs, before.total_macs) << text;
    EXPECT_EQ(after.rows.size(), before.rows.size()) << text;
  }
}

TEST(Network, PrePoolFeatureMaps) {
  Network<float> mv1(build_mv1(0.25, 10), 1);
  EXPECT_EQ(pre_pool_shape(mv1, 224), (Shape{1, 256, 7, 7}));
  Network<float> mv2(build_mv2(10), 1);
  EXPECT_EQ(pre_pool_shape(mv2, 224), (Shape{1, 1280, 7, 7}));
}

TEST(Network, ZeroInputGivesIdenticalLogitsAcrossBatch) {
  ModelGraph g = apply_ulsam(build_mv1(0.25, 4), parse_positions_csv("8:1,11"), 4);
  Network<double> net(g, 3);
  const Tensor<double> logits = net.forward(Tensor<double>(3, 3, 16, 16), Mode::Infer);
  ASSERT_EQ(logits.shape(), (Shape{3, 4, 1, 1}));
  for (Index n = 1; n < 3; ++n) {
    for (Index k = 0; k < 4; ++k) EXPECT_EQ(logits(n, k, 0, 0), logits(0, k, 0, 0));
  }
}

TEST(Network, InferenceIsDeterministic) {
  std::mt19937_64 rng(4);
  Network<double> net(apply_ulsam(build_mv1(0.25, 4), parse_positions_csv("9:1"), 2), 5);
  const Tensor<double> x = random_tensor({2, 3, 16, 16}, rng);
  EXPECT_TRUE(bitwise_equal(net.forward(x, Mode::Infer), net.forward(x, Mode::Infer)));
}

TEST(Network, SeedDeterminesWeights) {
  Network<float> a(build_mv1(0.25, 4), 9);
  Network<float> b(build_mv1(0.25, 4), 9);
  ASSERT_EQ(a.tensors().size(), b.tensors().size());
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    EXPECT_EQ(a.tensors()[i].name, b.tensors()[i].name);
    EXPECT_TRUE(bitwise_equal(*a.tensors()[i].tensor, *b.tensors()[i].tensor));
  }
}

TEST(Network, ParameterCountMatchesAnalyzer) {
  for (const ModelGraph& g :
       {build_mv1(0.5, 10), build_mv2(10),
        apply_ulsam(build_mv1(0.25, 4), parse_positions_csv("8:1,9:1,11"), 4)}) {
    Network<float> net(g, 0);
    EXPECT_EQ(net.parameter_count(), analyze_model(g, CostOptions{true}).total_params) << g.arch;
  }
}

TEST(Network, ClassifierGradientMatchesFiniteDifferences) {
  // The loss is smooth in the classifier weights, so no kink can fall
  // inside the difference stencil.
  std::mt19937_64 rng(6);
  Network<double> net(apply_ulsam(build_mv1(0.25, 4), parse_positions_csv("8:1,11"), 4), 7);
  const Tensor<double> x = random_tensor({2, 3, 8, 8}, rng);
  const std::vector<int> labels{1, 3};
  net.zero_grad();
  const auto first = cross_entropy(net.forward(x, Mode::Infer), labels);
  net.backward(first.grad);
  Tensor<double>* fc = nullptr;
  for (auto& t : net.tensors()) {
    if (t.name == "fc.weight") fc = t.tensor;
  }
  ASSERT_NE(fc, nullptr);
  Tensor<double> analytic(fc->shape());
  analytic.values() = fc->grad();
  auto loss = [&] { return cross_entropy(net.forward(x, Mode::Infer), labels).loss; };
  EXPECT_LT(ulsam::testing::max_relative_error(analytic, ulsam::testing::central_difference(*fc, loss)),
            1e-4);
}

TEST(Network, RejectsIncompatibleInput) {
  Network<float> net(build_mv1(0.25, 4), 0);
  EXPECT_THROW(net.forward(Tensor<float>(1, 1, 16, 16), Mode::Infer), ConfigError);
  EXPECT_THROW(net.forward(Tensor<float>(0, 3, 16, 16), Mode::Infer), ConfigError);
  Tensor<float> dy(1, 4, 1, 1);
  EXPECT_THROW(net.backward(dy), StateError);
}
