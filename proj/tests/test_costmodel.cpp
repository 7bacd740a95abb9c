#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "navseg/costmodel.hpp"

using namespace navseg;

TEST(CostModel, StandardConvExamples) {
  EXPECT_EQ(standard_conv_cost(3, 16, 64, 4, 4), 147456u);
  EXPECT_EQ(standard_conv_cost(1, 1, 1, 1, 1), 1u);
  EXPECT_EQ(standard_conv_cost(3, 3, 16, 4, 4), 6912u);
}

TEST(CostModel, SeparableConvExamples) {
  EXPECT_EQ(separable_conv_cost(3, 16, 64, 4, 4), 18688u);
  EXPECT_EQ(separable_conv_cost(1, 1, 1, 1, 1), 2u);
}

TEST(CostModel, RatioExamples) {
  EXPECT_NEAR(cost_reduction_ratio(3, 64), 1.0 / 64 + 1.0 / 9, 1e-15);
  EXPECT_NEAR(cost_reduction_ratio(3, 64), 0.12673611111111, 1e-12);
  EXPECT_EQ(cost_reduction_ratio(1, 1), 2.0);
  // 18688 / 147456 reduced
  EXPECT_EQ(cost_reduction_ratio_exact(3, 64), Rational::make(18688, 147456));
}

TEST(CostModel, RatioIdentityExactOnRandomShapes) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const Count k = 1 + uniform_index(rng, 7), ci = 1 + uniform_index(rng, 256), co = 1 + uniform_index(rng, 256);
    const Count h = 1 + uniform_index(rng, 512), w = 1 + uniform_index(rng, 512);
    const Rational lhs = Rational::make(separable_conv_cost(k, ci, co, h, w), standard_conv_cost(k, ci, co, h, w));
    // 1/co + 1/k^2 = (k^2 + co) / (co k^2), reduced by an independent gcd
    const Count num = k * k + co, den = co * k * k, g = std::gcd(num, den);
    EXPECT_EQ(lhs.num, num / g);
    EXPECT_EQ(lhs.den, den / g);
    EXPECT_EQ(lhs, cost_reduction_ratio_exact(k, co));
  }
}

TEST(CostModel, StrictlyMonotoneInEveryArgument) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    Count a[5] = {1 + uniform_index(rng, 5), 1 + uniform_index(rng, 64), 1 + uniform_index(rng, 64),
                  1 + uniform_index(rng, 64), 1 + uniform_index(rng, 64)};
    for (int j = 0; j < 5; ++j) {
      Count b[5] = {a[0], a[1], a[2], a[3], a[4]};
      b[j] += 1;
      EXPECT_LT(standard_conv_cost(a[0], a[1], a[2], a[3], a[4]), standard_conv_cost(b[0], b[1], b[2], b[3], b[4]));
      EXPECT_LT(separable_conv_cost(a[0], a[1], a[2], a[3], a[4]), separable_conv_cost(b[0], b[1], b[2], b[3], b[4]));
    }
  }
}

TEST(CostModel, RejectsZeroAndOverflow) {
  EXPECT_THROW(standard_conv_cost(0, 1, 1, 1, 1), std::invalid_argument);
  EXPECT_THROW(separable_conv_cost(3, 1, 0, 1, 1), std::invalid_argument);
  EXPECT_THROW(cost_reduction_ratio(3, 0), std::invalid_argument);
  const Count big = Count{1} << 20;
  EXPECT_THROW(standard_conv_cost(big, big, big, big, big), std::overflow_error);
}

TEST(CostModel, SingleConvParameterCount) {
  // One Initial block with 3 -> 16 channels is one 3x3 conv with 13 filters; a
  // plain 3x3 conv 3 -> 16 with bias stores 3*3*3*16 + 16 = 448.
  const Count conv_3_to_16 = 3 * 3 * 3 * 16 + 16;
  EXPECT_EQ(conv_3_to_16, 448u);
  NetworkSpec s;
  s.num_classes = 16;
  s.blocks = {{BlockKind::LastConv, 3, 16, 16}};
  EXPECT_EQ(count_params(build_network<float>(s, 0)), 448u);
  EXPECT_EQ(model_size_bytes(build_network<float>(s, 0)), 448u * 4);
}

TEST(CostModel, EmptyNetworkHasNoParameters) {
  Network<float> net;
  EXPECT_EQ(count_params(net), 0u);
}

TEST(CostModel, FactorizedBlockMacsMatchHandRecomputation) {
  const auto spec = table_spec(Variant::full);
  const auto report = network_cost_report(spec, {1, 3, 256, 512});
  for (const auto& b : report.per_block) {
    const BlockSpec& s = spec.blocks[b.block - 1];
    if (s.kind != BlockKind::Standard && s.kind != BlockKind::Downsample) continue;
    const Count mid = s.internal_channels;
    const Count hi = b.input.h, wi = b.input.w, ho = b.output.h, wo = b.output.w;
    const Count projection = s.in_channels * mid * hi * wi;
    const Count depthwise = 9 * mid * ho * wo;
    const Count expansion = mid * s.out_channels * ho * wo;
    EXPECT_EQ(b.macs, projection + depthwise + expansion) << "block " << b.block;
    // A dense 3x3 conv in place of depthwise+expansion costs 1/ratio times more.
    const double dense = static_cast<double>(standard_conv_cost(3, mid, s.out_channels, ho, wo));
    EXPECT_NEAR(static_cast<double>(depthwise + expansion) / cost_reduction_ratio(3, s.out_channels), dense, 1e-6 * dense);
  }
}

TEST(CostModel, ReportTotalsAreSumsAndDeterministic) {
  for (Variant v : {Variant::full, Variant::pruned}) {
    const auto a = network_cost_report(table_spec(v), {1, 3, 256, 512});
    const auto b = network_cost_report(table_spec(v), {1, 3, 256, 512});
    Count macs = 0, params = 0, bytes = 0;
    for (const auto& r : a.per_block) {
      macs += r.macs;
      params += r.params;
      bytes += r.bytes;
      EXPECT_EQ(r.bytes, 4 * r.params);
    }
    EXPECT_EQ(a.total_macs, macs);
    EXPECT_EQ(a.total_params, params);
    EXPECT_EQ(a.total_bytes, bytes);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(a.total_params, count_params(build_network<float>(v, 0)));
  }
  EXPECT_GT(network_cost_report(table_spec(Variant::full), {1, 3, 256, 512}).total_macs,
            network_cost_report(table_spec(Variant::pruned), {1, 3, 256, 512}).total_macs);
}

TEST(CostModel, BatchScalesMacsLinearly) {
  const auto one = network_cost_report(table_spec(Variant::pruned), {1, 3, 64, 64});
  const auto three = network_cost_report(table_spec(Variant::pruned), {3, 3, 64, 64});
  EXPECT_EQ(three.total_macs, 3 * one.total_macs);
  EXPECT_EQ(three.total_params, one.total_params);
}

TEST(CostModel, JsonAndTableOutput) {
  const auto r = network_cost_report(table_spec(Variant::pruned), {1, 3, 256, 512});
  const auto j = to_json(r);
  EXPECT_EQ(j["per_block"].size(), 30u);
  EXPECT_EQ(j["per_block"][6]["output"], "64x32x64");
  EXPECT_EQ(j["totals"]["params"].get<Count>(), r.total_params);
  const std::string t = to_table(r);
  EXPECT_NE(t.find("Total"), std::string::npos);
}
